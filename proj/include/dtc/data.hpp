#pragma once

// Synthetic blob segmentation data: generation, labeled/unlabeled split,
// cached level-set targets, batch sampling, flip/rotate augmentation, and the
// "DTCD" file format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtc/binary_io.hpp"
#include "dtc/grid.hpp"
#include "dtc/lsf.hpp"
#include "dtc/tensor.hpp"

namespace dtc {

struct GenConfig {
  std::uint32_t image_size = 64;
  std::uint32_t train_count = 80;
  std::uint32_t test_count = 20;
  double noise_std = 0.3;
  double contrast = 1.0;
  double background = 0.0;
  double axis_min = 0.12;  // ellipse semi-axes, as fractions of image_size
  double axis_max = 0.28;
  double deform_amplitude = 0.2;  // relative radial perturbation
  std::uint32_t deform_harmonics = 4;
  double bias_amplitude = 0.0;  // smooth additive intensity field
  std::uint32_t distractors = 0;  // unlabeled bright blobs per image
  double distractor_contrast = 0.0;
  double distractor_radius = 0.06;  // fraction of image_size

  void validate() const {
    if (image_size < 4 || image_size > 4096) throw std::invalid_argument("gen: image_size must be in [4, 4096]");
    if (train_count + test_count == 0) throw std::invalid_argument("gen: no samples requested");
    if (!(noise_std >= 0.0)) throw std::invalid_argument("gen: noise_std must be non-negative");
    if (!(axis_min > 0.0) || axis_min > axis_max)
      throw std::invalid_argument("gen: ellipse axes must satisfy 0 < axis_min <= axis_max");
    if (axis_max * (1.0 + deform_amplitude) > 0.5)
      throw std::invalid_argument("gen: ellipse axes exceed the image (axis_max * (1 + deform_amplitude) > 0.5)");
    if (!(deform_amplitude >= 0.0 && deform_amplitude < 1.0))
      throw std::invalid_argument("gen: deform_amplitude must be in [0, 1)");
    if (!(distractor_radius >= 0.0 && distractor_radius < 0.5))
      throw std::invalid_argument("gen: distractor_radius must be in [0, 0.5)");
  }

  friend bool operator==(const GenConfig&, const GenConfig&) = default;
};

struct Sample {
  std::uint32_t id = 0;
  Image image;
  std::optional<Mask> mask;
  std::optional<LevelSetMap> lsf_target;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
  GenConfig config;
  std::uint64_t seed = 0;
  std::vector<Sample> samples;  // samples[i].id == i
  std::vector<std::uint32_t> labeled_ids;
  std::vector<std::uint32_t> unlabeled_ids;
  std::vector<std::uint32_t> test_ids;

  const Sample& sample(std::uint32_t id) const { return samples.at(id); }

  /// Throws unless the id sets partition the samples and every labeled or test
  /// sample carries a mask.
  void validate() const {
    std::vector<int> seen(samples.size(), 0);
    for (const auto* ids : {&labeled_ids, &unlabeled_ids, &test_ids})
      for (std::uint32_t id : *ids) {
        if (id >= samples.size()) throw std::invalid_argument("dataset: id " + std::to_string(id) + " out of range");
        if (++seen[id] > 1) throw std::invalid_argument("dataset: id " + std::to_string(id) + " in several partitions");
      }
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].id != i) throw std::invalid_argument("dataset: sample ids must be dense and ordered");
      if (!seen[i]) throw std::invalid_argument("dataset: sample " + std::to_string(i) + " is in no partition");
    }
    for (const auto* ids : {&labeled_ids, &test_ids})
      for (std::uint32_t id : *ids)
        if (!samples[id].mask) throw std::invalid_argument("dataset: sample " + std::to_string(id) + " lacks a mask");
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline bool is_degenerate(const Mask& mask) {
  const auto fg = std::count(mask.cells.begin(), mask.cells.end(), std::uint8_t{1});
  return fg == 0 || static_cast<std::size_t>(fg) == mask.size();
}

inline double foreground_fraction(const Mask& mask) {
  const auto fg = std::count(mask.cells.begin(), mask.cells.end(), std::uint8_t{1});
  return static_cast<double>(fg) / static_cast<double>(mask.size());
}

namespace detail {

inline std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

inline Mask draw_blob(const GenConfig& c, std::mt19937_64& rng) {
  const double n = c.image_size;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double a = n * (c.axis_min + (c.axis_max - c.axis_min) * unit(rng));
  const double b = n * (c.axis_min + (c.axis_max - c.axis_min) * unit(rng));
  const double reach = std::max(a, b) * (1.0 + c.deform_amplitude);
  const double span = std::max(0.0, n - 2.0 * reach);
  const double cy = reach + span * unit(rng);
  const double cx = reach + span * unit(rng);
  const double angle = std::numbers::pi * unit(rng);
  std::vector<double> amp(c.deform_harmonics), phase(c.deform_harmonics);
  for (std::uint32_t h = 0; h < c.deform_harmonics; ++h) {
    amp[h] = c.deform_amplitude * (2.0 * unit(rng) - 1.0) / (h + 1);
    phase[h] = 2.0 * std::numbers::pi * unit(rng);
  }
  // Scale so the radial perturbation never exceeds deform_amplitude.
  double amp_total = 0.0;
  for (double v : amp) amp_total += std::abs(v);
  const double amp_scale = amp_total > c.deform_amplitude && amp_total > 0.0 ? c.deform_amplitude / amp_total : 1.0;

  const double ca = std::cos(angle), sa = std::sin(angle);
  Mask mask(c.image_size, c.image_size, 0);
  for (std::size_t y = 0; y < c.image_size; ++y)
    for (std::size_t x = 0; x < c.image_size; ++x) {
      const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
      const double u = (ca * dx + sa * dy) / a;
      const double v = (-sa * dx + ca * dy) / b;
      const double r = std::hypot(u, v);
      const double theta = std::atan2(v, u);
      double limit = 1.0;
      for (std::uint32_t h = 0; h < c.deform_harmonics; ++h)
        limit += amp_scale * amp[h] * std::cos((h + 2) * theta + phase[h]);
      mask(y, x) = r <= limit ? 1 : 0;
    }
  return mask;
}

inline Image render(const GenConfig& c, const Mask& mask, std::mt19937_64& rng) {
  const double n = c.image_size;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  Image image(c.image_size, c.image_size, c.background);

  const double fy = 2.0 * std::numbers::pi * (0.5 + unit(rng)) / n;
  const double fx = 2.0 * std::numbers::pi * (0.5 + unit(rng)) / n;
  const double py = 2.0 * std::numbers::pi * unit(rng);
  const double px = 2.0 * std::numbers::pi * unit(rng);

  struct Blob {
    double y, x, r;
  };
  std::vector<Blob> blobs;
  for (std::uint32_t i = 0; i < c.distractors; ++i)
    blobs.push_back({n * unit(rng), n * unit(rng), n * c.distractor_radius * (0.6 + 0.8 * unit(rng))});

  for (std::size_t y = 0; y < c.image_size; ++y)
    for (std::size_t x = 0; x < c.image_size; ++x) {
      double v = c.background + c.contrast * mask(y, x);
      v += c.bias_amplitude * 0.5 * (std::sin(fy * y + py) + std::sin(fx * x + px));
      for (const Blob& blob : blobs) {
        const double d2 = (y + 0.5 - blob.y) * (y + 0.5 - blob.y) + (x + 0.5 - blob.x) * (x + 0.5 - blob.x);
        v += c.distractor_contrast * std::exp(-d2 / (2.0 * blob.r * blob.r));
      }
      image(y, x) = v;
    }
  if (c.noise_std > 0.0)
    for (double& v : image.cells) v += c.noise_std * noise(rng);
  return image;
}

}  // namespace detail

/// Renders train_count + test_count samples. Sample i depends only on
/// (seed, i); test samples come last. Every training sample starts in the
/// unlabeled pool with its mask attached; split() decides what stays visible.
inline Dataset generate(const GenConfig& config, std::uint64_t seed) {
  config.validate();
  Dataset ds;
  ds.config = config;
  ds.seed = seed;
  const std::uint32_t total = config.train_count + config.test_count;
  for (std::uint32_t i = 0; i < total; ++i) {
    auto rng = detail::sample_rng(seed, i);
    Mask mask;
    for (int attempt = 0;; ++attempt) {
      if (attempt == 1000) throw std::runtime_error("gen: could not draw a non-degenerate mask");
      mask = detail::draw_blob(config, rng);
      if (!is_degenerate(mask)) break;
    }
    Sample s;
    s.id = i;
    s.image = detail::render(config, mask, rng);
    s.mask = std::move(mask);
    ds.samples.push_back(std::move(s));
    (i < config.train_count ? ds.unlabeled_ids : ds.test_ids).push_back(i);
  }
  return ds;
}

/// Reassigns the training pool: round(fraction * pool) samples stay labeled,
/// the rest lose their masks and level-set targets.
inline Dataset split(const Dataset& in, double labeled_fraction, std::uint64_t seed) {
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0))
    throw std::invalid_argument("split: labeled fraction must be in (0, 1]");
  std::vector<std::uint32_t> pool = in.labeled_ids;
  pool.insert(pool.end(), in.unlabeled_ids.begin(), in.unlabeled_ids.end());
  std::sort(pool.begin(), pool.end());
  for (std::uint32_t id : pool)
    if (!in.sample(id).mask)
      throw std::invalid_argument("split: training sample " + std::to_string(id) + " has no mask to reveal");
  const auto labeled = static_cast<std::size_t>(std::llround(labeled_fraction * static_cast<double>(pool.size())));
  if (labeled == 0)
    throw std::invalid_argument("split: fraction " + std::to_string(labeled_fraction) + " of " +
                                std::to_string(pool.size()) + " training samples leaves none labeled");

  std::mt19937_64 rng(seed);
  std::vector<std::uint32_t> order = pool;
  std::shuffle(order.begin(), order.end(), rng);

  Dataset out = in;
  out.labeled_ids.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(labeled));
  out.unlabeled_ids.assign(order.begin() + static_cast<std::ptrdiff_t>(labeled), order.end());
  std::sort(out.labeled_ids.begin(), out.labeled_ids.end());
  std::sort(out.unlabeled_ids.begin(), out.unlabeled_ids.end());
  for (std::uint32_t id : out.unlabeled_ids) {
    out.samples[id].mask.reset();
    out.samples[id].lsf_target.reset();
  }
  return out;
}

/// Copy holding only the labeled and test samples, renumbered densely in id
/// order. Used for runs that must not see the unlabeled pool at all.
inline Dataset labeled_only(const Dataset& in) {
  Dataset out;
  out.config = in.config;
  out.seed = in.seed;
  const std::set<std::uint32_t> labeled(in.labeled_ids.begin(), in.labeled_ids.end());
  const std::set<std::uint32_t> test(in.test_ids.begin(), in.test_ids.end());
  for (const Sample& s : in.samples) {
    const bool is_labeled = labeled.count(s.id) > 0;
    if (!is_labeled && !test.count(s.id)) continue;
    Sample copy = s;
    copy.id = static_cast<std::uint32_t>(out.samples.size());
    (is_labeled ? out.labeled_ids : out.test_ids).push_back(copy.id);
    out.samples.push_back(std::move(copy));
  }
  return out;
}

/// Fills the level-set target of every labeled sample.
inline void precompute_lsf(Dataset& ds, DistanceScale scale = DistanceScale::normalized) {
  for (std::uint32_t id : ds.labeled_ids) {
    Sample& s = ds.samples.at(id);
    if (!s.mask) throw std::invalid_argument("precompute_lsf: labeled sample " + std::to_string(id) + " has no mask");
    if (is_degenerate(*s.mask))
      throw std::invalid_argument("precompute_lsf: sample " + std::to_string(id) + " has a degenerate mask");
    s.lsf_target = signed_distance(*s.mask, scale);
  }
}

struct BatchSizes {
  std::size_t labeled = 2;
  std::size_t unlabeled = 2;
};

struct Batch {
  std::vector<std::uint32_t> labeled;
  std::vector<std::uint32_t> unlabeled;
};

/// Uniform draws with replacement from each pool.
inline Batch sample_batch(const Dataset& ds, std::mt19937_64& rng, BatchSizes sizes = {}) {
  if (ds.labeled_ids.empty() && sizes.labeled > 0) throw std::invalid_argument("sample_batch: labeled pool is empty");
  if (ds.unlabeled_ids.empty() && sizes.unlabeled > 0)
    throw std::invalid_argument("sample_batch: unlabeled pool is empty");
  Batch batch;
  auto draw = [&](const std::vector<std::uint32_t>& pool) {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    return pool[pick(rng)];
  };
  for (std::size_t i = 0; i < sizes.labeled; ++i) batch.labeled.push_back(draw(ds.labeled_ids));
  for (std::size_t i = 0; i < sizes.unlabeled; ++i) batch.unlabeled.push_back(draw(ds.unlabeled_ids));
  return batch;
}

/// Isometry drawn by augment(): optional flips then quarter turns.
struct Isometry {
  bool flip_h = false;
  bool flip_v = false;
  int quarter_turns = 0;
};

template <typename T>
Grid<T> apply(const Isometry& iso, Grid<T> g) {
  if (iso.flip_h) g = flip_horizontal(g);
  if (iso.flip_v) g = flip_vertical(g);
  for (int i = 0; i < iso.quarter_turns; ++i) g = rotate90(g);
  return g;
}

inline Sample apply(const Isometry& iso, Sample s) {
  s.image = apply(iso, std::move(s.image));
  if (s.mask) s.mask = apply(iso, std::move(*s.mask));
  if (s.lsf_target) s.lsf_target->values = apply(iso, std::move(s.lsf_target->values));
  return s;
}

/// Random flips and 90-degree rotations applied identically to image, mask and
/// level-set target. Rotations are skipped for non-square samples.
inline Sample augment(const Sample& s, std::mt19937_64& rng, bool enabled = true) {
  if (!enabled) return s;
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<int> turns(0, 3);
  Isometry iso;
  iso.flip_h = coin(rng) == 1;
  iso.flip_v = coin(rng) == 1;
  iso.quarter_turns = turns(rng);
  if (s.image.height != s.image.width) iso.quarter_turns = 0;
  return apply(iso, s);
}

/// Stacks images into an [N, 1, H, W] tensor.
template <typename T>
Tensor stack(const std::vector<const Grid<T>*>& grids) {
  if (grids.empty()) throw std::invalid_argument("stack: no grids");
  const std::size_t h = grids.front()->height, w = grids.front()->width;
  Tensor out(Shape{grids.size(), 1, h, w});
  for (std::size_t i = 0; i < grids.size(); ++i) {
    if (grids[i]->height != h || grids[i]->width != w) throw ShapeError("stack: grids differ in size");
    for (std::size_t j = 0; j < h * w; ++j) out[i * h * w + j] = static_cast<double>(grids[i]->cells[j]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// "DTCD" file: magic, u32 version, GenConfig block, u64 seed, u32 sample count,
// then per sample: u32 id, u8 flags, u16 H, u16 W, H*W f64 image,
// [H*W u8 mask], [H*W f64 level set, f64 pos_max, f64 neg_max]; trailing CRC32
// over all preceding bytes.
//
// flags: bit 0 mask present, bit 1 level set present, bits 2-3 partition
// (0 unlabeled, 1 labeled, 2 test).

inline constexpr std::uint32_t kDatasetVersion = 1;

namespace detail {

enum : std::uint8_t { kHasMask = 1, kHasLsf = 2 };
enum class Role : std::uint8_t { unlabeled = 0, labeled = 1, test = 2 };

inline void write_gen_config(ByteWriter& w, const GenConfig& c) {
  w.u32(c.image_size);
  w.u32(c.train_count);
  w.u32(c.test_count);
  w.f64(c.noise_std);
  w.f64(c.contrast);
  w.f64(c.background);
  w.f64(c.axis_min);
  w.f64(c.axis_max);
  w.f64(c.deform_amplitude);
  w.u32(c.deform_harmonics);
  w.f64(c.bias_amplitude);
  w.u32(c.distractors);
  w.f64(c.distractor_contrast);
  w.f64(c.distractor_radius);
}

inline GenConfig read_gen_config(ByteReader& r) {
  GenConfig c;
  c.image_size = r.u32();
  c.train_count = r.u32();
  c.test_count = r.u32();
  c.noise_std = r.f64();
  c.contrast = r.f64();
  c.background = r.f64();
  c.axis_min = r.f64();
  c.axis_max = r.f64();
  c.deform_amplitude = r.f64();
  c.deform_harmonics = r.u32();
  c.bias_amplitude = r.f64();
  c.distractors = r.u32();
  c.distractor_contrast = r.f64();
  c.distractor_radius = r.f64();
  return c;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  ds.validate();
  std::vector<detail::Role> roles(ds.samples.size(), detail::Role::unlabeled);
  for (std::uint32_t id : ds.labeled_ids) roles[id] = detail::Role::labeled;
  for (std::uint32_t id : ds.test_ids) roles[id] = detail::Role::test;

  ByteWriter w;
  w.magic("DTCD");
  w.u32(kDatasetVersion);
  detail::write_gen_config(w, ds.config);
  w.u64(ds.seed);
  w.u32(static_cast<std::uint32_t>(ds.samples.size()));
  for (const Sample& s : ds.samples) {
    if (s.image.height > 0xFFFF || s.image.width > 0xFFFF) throw std::invalid_argument("dataset: image too large");
    std::uint8_t flags = static_cast<std::uint8_t>(static_cast<std::uint8_t>(roles[s.id]) << 2);
    if (s.mask) flags |= detail::kHasMask;
    if (s.lsf_target) flags |= detail::kHasLsf;
    w.u32(s.id);
    w.u8(flags);
    w.u16(static_cast<std::uint16_t>(s.image.height));
    w.u16(static_cast<std::uint16_t>(s.image.width));
    for (double v : s.image.cells) w.f64(v);
    if (s.mask) w.raw(s.mask->cells);
    if (s.lsf_target) {
      for (double v : s.lsf_target->values.cells) w.f64(v);
      w.f64(s.lsf_target->pos_max);
      w.f64(s.lsf_target->neg_max);
    }
  }
  const std::uint32_t crc = crc32_of(w.bytes());
  w.u32(crc);
  return std::move(w.bytes());
}

inline Dataset decode_dataset(std::span<const std::uint8_t> bytes, const std::string& what = "dataset") {
  {
    ByteReader header(bytes, what);
    header.expect_magic("DTCD");
    const std::uint32_t version = header.u32();
    if (version != kDatasetVersion)
      header.fail("unsupported dataset version " + std::to_string(version) + " (expected " +
                  std::to_string(kDatasetVersion) + ")");
    if (bytes.size() < 12) header.fail("truncated before CRC");
  }
  const auto payload = bytes.first(bytes.size() - 4);
  ByteReader crc_reader(bytes.last(4), what);
  const std::uint32_t stored = crc_reader.u32();
  if (stored != crc32_of(payload))
    throw FormatError(what + ": CRC mismatch over " + std::to_string(payload.size()) +
                      " payload bytes (file corrupted or truncated)");

  ByteReader r(payload, what);
  r.expect_magic("DTCD");
  r.u32();
  Dataset ds;
  ds.config = detail::read_gen_config(r);
  ds.seed = r.u64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    Sample s;
    s.id = r.u32();
    if (s.id != i) r.fail("sample id " + std::to_string(s.id) + " out of order (expected " + std::to_string(i) + ")");
    const std::uint8_t flags = r.u8();
    const std::size_t h = r.u16(), w = r.u16();
    s.image = Image(h, w);
    for (double& v : s.image.cells) v = r.f64();
    if (flags & detail::kHasMask) {
      auto raw = r.raw(h * w);
      s.mask = Mask(h, w, std::vector<std::uint8_t>(raw.begin(), raw.end()));
      for (auto v : s.mask->cells)
        if (v > 1) r.fail("non-binary mask value in sample " + std::to_string(i));
    }
    if (flags & detail::kHasLsf) {
      if (!s.mask) r.fail("level set without mask in sample " + std::to_string(i));
      LevelSetMap lsf{Image(h, w), 0.0, 0.0};
      for (double& v : lsf.values.cells) v = r.f64();
      lsf.pos_max = r.f64();
      lsf.neg_max = r.f64();
      s.lsf_target = std::move(lsf);
    }
    switch (static_cast<detail::Role>((flags >> 2) & 3)) {
      case detail::Role::unlabeled: ds.unlabeled_ids.push_back(i); break;
      case detail::Role::labeled: ds.labeled_ids.push_back(i); break;
      case detail::Role::test: ds.test_ids.push_back(i); break;
      default: r.fail("bad partition flag in sample " + std::to_string(i));
    }
    ds.samples.push_back(std::move(s));
  }
  if (r.remaining() != 0) r.fail("trailing bytes after samples");
  try {
    ds.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(what + ": " + e.what());
  }
  return ds;
}

inline void save(const Dataset& ds, const std::filesystem::path& path) { write_file(path, encode_dataset(ds)); }

inline Dataset load(const std::filesystem::path& path) { return decode_dataset(read_file(path), path.string()); }

}  // namespace dtc
