#pragma once

// Synthetic clothes-changing dataset: generation, persistence, splits,
// identity-balanced batch sampling and training-time augmentation.
//
// Every image carries an identity signature (a head glyph keyed by the
// identity label) and a clothes signature (torso/leg colours and stripes keyed
// by the clothes label). Each outfit is worn by exactly one identity, so in
// the training data the clothes are a perfect, and far more salient, predictor
// of identity than the glyph.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ccil/common.hpp"
#include "ccil/png_io.hpp"

namespace ccil::data {

enum class Split { train, query, gallery };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
  }
  return "train";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "query") return Split::query;
  if (s == "gallery") return Split::gallery;
  throw DataError("unknown split tag '" + std::string(s) + "'");
}

enum class Setting { clothes_changing, standard };

inline std::string_view to_string(Setting s) {
  return s == Setting::clothes_changing ? "clothes_changing" : "standard";
}

inline Setting parse_setting(std::string_view s) {
  if (s == "cc" || s == "clothes_changing" || s == "clothes-changing") return Setting::clothes_changing;
  if (s == "standard") return Setting::standard;
  throw ConfigError("unknown evaluation setting '" + std::string(s) + "'");
}

struct SampleRecord {
  std::string image_id;
  int identity_label = 0;
  int clothes_label = 0;
  int camera_id = 0;
  Split split = Split::train;

  bool operator==(const SampleRecord&) const = default;
};

struct DatasetManifest {
  std::vector<SampleRecord> records;
  int n_identities = 0;  // N
  int n_clothes = 0;     // M
  int n_cams = 0;
  std::uint64_t generator_seed = 0;

  std::size_t size() const { return records.size(); }
  bool operator==(const DatasetManifest&) const = default;
};

/// Checks label ranges and that clothes -> identity is a function. With
/// `full_coverage` the labels must also cover [0, N) and [0, M) and every
/// identity must own at least two outfits.
inline void validate_manifest(const DatasetManifest& m, bool full_coverage) {
  if (m.n_identities < 1 || m.n_clothes < 1 || m.n_cams < 1) {
    throw DataError("manifest counts must be positive");
  }
  std::map<int, int> owner;
  std::set<std::string> ids;
  for (const auto& r : m.records) {
    if (r.identity_label < 0 || r.identity_label >= m.n_identities) {
      throw DataError("identity label out of range in " + r.image_id);
    }
    if (r.clothes_label < 0 || r.clothes_label >= m.n_clothes) {
      throw DataError("clothes label out of range in " + r.image_id);
    }
    if (r.camera_id < 0 || r.camera_id >= m.n_cams) {
      throw DataError("camera id out of range in " + r.image_id);
    }
    if (!ids.insert(r.image_id).second) throw DataError("duplicate image id " + r.image_id);
    auto [it, fresh] = owner.emplace(r.clothes_label, r.identity_label);
    if (!fresh && it->second != r.identity_label) {
      throw DataError("clothes " + std::to_string(r.clothes_label) + " worn by identities " +
                      std::to_string(it->second) + " and " + std::to_string(r.identity_label));
    }
  }
  if (!full_coverage) return;
  if (static_cast<int>(owner.size()) != m.n_clothes) throw DataError("clothes labels do not cover [0, M)");
  std::map<int, int> outfits;
  for (auto [c, id] : owner) ++outfits[id];
  if (static_cast<int>(outfits.size()) != m.n_identities) {
    throw DataError("identity labels do not cover [0, N)");
  }
  for (auto [id, n] : outfits) {
    if (n < 2) throw DataError("identity " + std::to_string(id) + " has fewer than two outfits");
  }
}

// ---------------------------------------------------------------------------
// Manifest file:  "#ccil-manifest v1 N=<n> M=<m> CAMS=<c> SEED=<s>" followed by
// one "image_id,identity,clothes,camera,split" record per line.

inline void write_manifest(std::ostream& os, const DatasetManifest& m) {
  os << "#ccil-manifest v1 N=" << m.n_identities << " M=" << m.n_clothes << " CAMS=" << m.n_cams
     << " SEED=" << m.generator_seed << '\n';
  for (const auto& r : m.records) {
    os << r.image_id << ',' << r.identity_label << ',' << r.clothes_label << ',' << r.camera_id << ','
       << to_string(r.split) << '\n';
  }
}

inline DatasetManifest read_manifest(std::istream& is) {
  DatasetManifest m;
  std::string line;
  if (!std::getline(is, line)) throw DataError("empty manifest");
  {
    std::istringstream header(line);
    std::string magic, version;
    header >> magic >> version;
    if (magic != "#ccil-manifest" || version != "v1") throw DataError("bad manifest header: " + line);
    std::string kv;
    bool seen[4] = {false, false, false, false};
    while (header >> kv) {
      auto eq = kv.find('=');
      if (eq == std::string::npos) throw DataError("bad manifest header field: " + kv);
      auto key = kv.substr(0, eq);
      auto value = kv.substr(eq + 1);
      try {
        if (key == "N") m.n_identities = std::stoi(value), seen[0] = true;
        else if (key == "M") m.n_clothes = std::stoi(value), seen[1] = true;
        else if (key == "CAMS") m.n_cams = std::stoi(value), seen[2] = true;
        else if (key == "SEED") m.generator_seed = std::stoull(value), seen[3] = true;
        else throw DataError("unknown manifest header field: " + key);
      } catch (const std::logic_error&) {
        throw DataError("bad manifest header value: " + kv);
      }
    }
    if (!(seen[0] && seen[1] && seen[2] && seen[3])) throw DataError("incomplete manifest header");
  }
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::array<std::string, 5> fields;
    std::istringstream ls(line);
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (!std::getline(ls, fields[i], ',')) {
        throw DataError("manifest line " + std::to_string(lineno) + ": expected 5 fields");
      }
    }
    SampleRecord r;
    r.image_id = fields[0];
    try {
      r.identity_label = std::stoi(fields[1]);
      r.clothes_label = std::stoi(fields[2]);
      r.camera_id = std::stoi(fields[3]);
    } catch (const std::logic_error&) {
      throw DataError("manifest line " + std::to_string(lineno) + ": bad integer field");
    }
    r.split = parse_split(fields[4]);
    m.records.push_back(std::move(r));
  }
  validate_manifest(m, false);
  return m;
}

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_manifest(os, m);
  if (!os) throw Error("failed writing " + path.string());
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open manifest " + path.string());
  return read_manifest(is);
}

// ---------------------------------------------------------------------------
// Generation

using ImageStore = std::map<std::string, io::RgbImage>;

struct GeneratorConfig {
  int n_identities = 20;
  int clothes_per_identity = 2;
  int images_per_outfit = 20;
  int n_cams = 3;
  int height = 64;
  int width = 32;
  std::uint64_t seed = 7;
  /// Blend weight of the identity glyph ink over the skin tone.
  double glyph_contrast = 0.45;
};

struct SyntheticDataset {
  DatasetManifest manifest;
  ImageStore images;
};

namespace detail {

using Rgb = std::array<double, 3>;

inline Rgb random_colour(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  return {u(rng), u(rng), u(rng)};
}

inline Rgb lerp(const Rgb& a, const Rgb& b, double t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

struct IdentityLook {
  std::uint16_t glyph = 0;  // 4x4 bit pattern, row-major
  Rgb skin{};
  Rgb ink{};
  Rgb hair{};
};

struct OutfitLook {
  Rgb top{};
  Rgb bottom{};
  Rgb stripe{};
  int stripe_period = 0;  // 0 = plain
  bool vertical = false;
};

inline std::vector<IdentityLook> identity_looks(const GeneratorConfig& cfg) {
  std::vector<IdentityLook> looks(static_cast<std::size_t>(cfg.n_identities));
  std::mt19937_64 glyph_rng(derive_seed(cfg.seed, 0x61797068ULL));
  std::set<std::uint16_t> used;
  for (auto& look : looks) {
    // Glyphs are unique and balanced (6..10 set cells) so that no identity is
    // trivially blank.
    for (;;) {
      auto code = static_cast<std::uint16_t>(glyph_rng() & 0xffffU);
      int bits = std::popcount(static_cast<unsigned>(code));
      if (bits >= 6 && bits <= 10 && used.insert(code).second) {
        look.glyph = code;
        break;
      }
    }
  }
  for (int id = 0; id < cfg.n_identities; ++id) {
    std::mt19937_64 rng(derive_seed(cfg.seed, 0x1d, static_cast<std::uint64_t>(id)));
    auto& look = looks[static_cast<std::size_t>(id)];
    std::uniform_real_distribution<double> tone(0.55, 0.85);
    double t = tone(rng);
    look.skin = {t, t * 0.82, t * 0.7};
    look.ink = lerp(look.skin, random_colour(rng, 0.0, 1.0), cfg.glyph_contrast);
    look.hair = random_colour(rng, 0.05, 0.5);
  }
  return looks;
}

inline OutfitLook outfit_look(const GeneratorConfig& cfg, int clothes) {
  std::mt19937_64 rng(derive_seed(cfg.seed, 0xc1, static_cast<std::uint64_t>(clothes)));
  OutfitLook o;
  o.top = random_colour(rng, 0.05, 0.95);
  o.bottom = random_colour(rng, 0.05, 0.95);
  o.stripe = random_colour(rng, 0.05, 0.95);
  constexpr std::array<int, 4> periods{0, 3, 4, 6};
  o.stripe_period = periods[rng() % periods.size()];
  o.vertical = (rng() & 1U) != 0;
  return o;
}

inline void fill_rect(std::vector<double>& px, int H, int W, int y0, int y1, int x0, int x1,
                      const auto& colour_at) {
  for (int y = std::max(0, y0); y < std::min(H, y1); ++y) {
    for (int x = std::max(0, x0); x < std::min(W, x1); ++x) {
      Rgb c = colour_at(y - y0, x - x0);
      for (int k = 0; k < 3; ++k) px[(static_cast<std::size_t>(y) * W + x) * 3 + k] = c[k];
    }
  }
}

inline io::RgbImage render(const GeneratorConfig& cfg, const IdentityLook& who, const OutfitLook& outfit,
                           int camera, std::mt19937_64& rng) {
  const int H = cfg.height;
  const int W = cfg.width;
  std::vector<double> px(static_cast<std::size_t>(H) * W * 3);

  // Background: camera-dependent grey level with mild texture.
  std::normal_distribution<double> bg_noise(0.0, 0.03);
  double bg = 0.35 + 0.1 * camera / std::max(1, cfg.n_cams - 1);
  for (auto& v : px) v = bg + bg_noise(rng);

  std::uniform_int_distribution<int> jitter(-2, 2);
  const int dy = jitter(rng);
  const int dx = jitter(rng);
  auto row = [&](double f) { return static_cast<int>(std::lround(f * H)) + dy; };
  auto col = [&](double f) { return static_cast<int>(std::lround(f * W)) + dx; };

  // Head: hair band on top, 4x4 identity glyph over the face.
  const int hy0 = row(0.04), hy1 = row(0.31), hx0 = col(0.22), hx1 = col(0.78);
  const int hair_rows = std::max(1, (hy1 - hy0) / 6);
  fill_rect(px, H, W, hy0, hy0 + hair_rows, hx0, hx1, [&](int, int) { return who.hair; });
  const int gy0 = hy0 + hair_rows;
  const int gh = hy1 - gy0;
  const int gw = hx1 - hx0;
  fill_rect(px, H, W, gy0, hy1, hx0, hx1, [&](int y, int x) {
    int cy = std::min(3, y * 4 / std::max(1, gh));
    int cx = std::min(3, x * 4 / std::max(1, gw));
    bool on = (who.glyph >> (cy * 4 + cx)) & 1U;
    return on ? who.ink : who.skin;
  });

  // Torso and legs: outfit colours with optional stripes on the top.
  fill_rect(px, H, W, row(0.33), row(0.66), col(0.16), col(0.84), [&](int y, int x) {
    if (outfit.stripe_period > 0) {
      int t = outfit.vertical ? x : y;
      if ((t / outfit.stripe_period) % 2 == 1) return outfit.stripe;
    }
    return outfit.top;
  });
  fill_rect(px, H, W, row(0.66), row(0.97), col(0.25), col(0.75), [&](int, int) { return outfit.bottom; });

  // Camera: brightness offset plus Gaussian noise with per-camera variance.
  const double offset = cfg.n_cams > 1 ? 0.16 * camera / (cfg.n_cams - 1) - 0.08 : 0.0;
  std::normal_distribution<double> noise(0.0, 0.02 + 0.015 * camera);
  std::uniform_real_distribution<double> gain(0.92, 1.08);
  const double g = gain(rng);

  io::RgbImage out;
  out.height = H;
  out.width = W;
  out.pixels.resize(px.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    double v = std::clamp(px[i] * g + offset + noise(rng), 0.0, 1.0);
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

inline std::string image_id(int identity, int clothes, int k) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "p%03d_c%03d_%03d", identity, clothes, k);
  return buf;
}

}  // namespace detail

/// Renders N * clothes_per_identity * images_per_outfit images. Outfit
/// `identity * clothes_per_identity + j` belongs to `identity` only.
inline SyntheticDataset generate_synthetic_dataset(const GeneratorConfig& cfg) {
  if (cfg.n_identities < 1 || cfg.images_per_outfit < 1 || cfg.n_cams < 1) {
    throw ConfigError("dataset counts must be >= 1");
  }
  if (cfg.clothes_per_identity < 2) {
    throw ConfigError("clothes_per_identity must be >= 2 for clothes-changing evaluation");
  }
  if (cfg.height < 8 || cfg.width < 8) throw ConfigError("image size must be at least 8x8");

  SyntheticDataset ds;
  auto& m = ds.manifest;
  m.n_identities = cfg.n_identities;
  m.n_clothes = cfg.n_identities * cfg.clothes_per_identity;
  m.n_cams = cfg.n_cams;
  m.generator_seed = cfg.seed;

  const auto looks = detail::identity_looks(cfg);
  for (int id = 0; id < cfg.n_identities; ++id) {
    for (int j = 0; j < cfg.clothes_per_identity; ++j) {
      const int clothes = id * cfg.clothes_per_identity + j;
      const auto outfit = detail::outfit_look(cfg, clothes);
      for (int k = 0; k < cfg.images_per_outfit; ++k) {
        std::mt19937_64 rng(derive_seed(cfg.seed, 0x1a, static_cast<std::uint64_t>(clothes),
                                        static_cast<std::uint64_t>(k)));
        const int cam = static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.n_cams));
        SampleRecord r{detail::image_id(id, clothes, k), id, clothes, cam, Split::train};
        ds.images.emplace(r.image_id, detail::render(cfg, looks[static_cast<std::size_t>(id)], outfit, cam, rng));
        m.records.push_back(std::move(r));
      }
    }
  }
  return ds;
}

/// Writes `manifest.txt` and `images/<image_id>.png` under `dir`.
inline void save_dataset(const std::filesystem::path& dir, const DatasetManifest& manifest,
                         const ImageStore& images) {
  std::filesystem::create_directories(dir / "images");
  save_manifest(dir / "manifest.txt", manifest);
  for (const auto& r : manifest.records) {
    auto it = images.find(r.image_id);
    if (it == images.end()) throw DataError("no image for " + r.image_id);
    io::write_png(dir / "images" / (r.image_id + ".png"), it->second);
  }
}

inline SyntheticDataset load_dataset(const std::filesystem::path& dir) {
  SyntheticDataset ds;
  ds.manifest = load_manifest(dir / "manifest.txt");
  for (const auto& r : ds.manifest.records) {
    ds.images.emplace(r.image_id, io::read_png(dir / "images" / (r.image_id + ".png")));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitOptions {
  Setting setting = Setting::clothes_changing;
  double holdout_fraction = 0.25;
  std::uint64_t seed = 0;
  /// Hold out whole identities instead of images (not used by the desk protocol).
  bool open_set = false;
};

struct Splits {
  DatasetManifest train;
  DatasetManifest query;
  DatasetManifest gallery;
};

namespace detail {

inline DatasetManifest empty_like(const DatasetManifest& m) {
  DatasetManifest out;
  out.n_identities = m.n_identities;
  out.n_clothes = m.n_clothes;
  out.n_cams = m.n_cams;
  out.generator_seed = m.generator_seed;
  return out;
}

}  // namespace detail

/// Keeps only the gallery images whose clothes differ from every query outfit
/// of the same identity.
inline DatasetManifest clothes_changing_gallery(const DatasetManifest& query, const DatasetManifest& gallery) {
  std::map<int, std::set<int>> query_outfits;
  for (const auto& r : query.records) query_outfits[r.identity_label].insert(r.clothes_label);
  auto out = detail::empty_like(gallery);
  for (const auto& r : gallery.records) {
    auto it = query_outfits.find(r.identity_label);
    if (it != query_outfits.end() && it->second.count(r.clothes_label)) continue;
    out.records.push_back(r);
  }
  return out;
}

/// Partitions the manifest into train / query / gallery. Each outfit
/// contributes round(holdout_fraction * n) images to the test pool; for each
/// test identity one outfit is chosen as the query outfit, half of its test
/// images (rounded up) become queries and the remaining test images form the
/// standard gallery. The clothes-changing gallery drops the query outfit.
inline Splits make_splits(const DatasetManifest& manifest, const SplitOptions& opt) {
  if (!(opt.holdout_fraction >= 0.0 && opt.holdout_fraction <= 1.0)) {
    throw ConfigError("holdout_fraction must be in [0, 1]");
  }
  validate_manifest(manifest, false);
  std::mt19937_64 rng(derive_seed(opt.seed, 0x5711));

  std::map<int, std::map<int, std::vector<std::size_t>>> groups;  // identity -> clothes -> records
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    groups[r.identity_label][r.clothes_label].push_back(i);
  }

  std::set<int> test_identities;
  if (opt.open_set) {
    std::vector<int> ids;
    for (auto& [id, _] : groups) ids.push_back(id);
    std::shuffle(ids.begin(), ids.end(), rng);
    auto n_test = static_cast<std::size_t>(std::lround(opt.holdout_fraction * static_cast<double>(ids.size())));
    test_identities.insert(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_test));
  }

  Splits s{detail::empty_like(manifest), detail::empty_like(manifest), detail::empty_like(manifest)};
  auto take = [&](DatasetManifest& dst, std::size_t idx, Split tag) {
    auto r = manifest.records[idx];
    r.split = tag;
    dst.records.push_back(std::move(r));
  };

  bool any_test = false;
  for (auto& [id, outfits] : groups) {
    std::map<int, std::vector<std::size_t>> test_pool;
    for (auto& [clothes, idxs] : outfits) {
      auto shuffled = idxs;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      std::size_t n_test;
      if (opt.open_set) {
        n_test = test_identities.count(id) ? shuffled.size() : 0;
      } else {
        n_test = static_cast<std::size_t>(std::lround(opt.holdout_fraction * static_cast<double>(shuffled.size())));
      }
      std::sort(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_test));
      std::sort(shuffled.begin() + static_cast<std::ptrdiff_t>(n_test), shuffled.end());
      for (std::size_t k = n_test; k < shuffled.size(); ++k) take(s.train, shuffled[k], Split::train);
      if (n_test > 0) test_pool[clothes].assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_test));
    }
    if (test_pool.empty()) continue;
    any_test = true;
    if (opt.setting == Setting::clothes_changing && test_pool.size() < 2) {
      throw DataError("identity " + std::to_string(id) +
                      " has a single outfit in the test pool; clothes-changing evaluation impossible");
    }
    auto pick = test_pool.begin();
    std::advance(pick, static_cast<std::ptrdiff_t>(rng() % test_pool.size()));
    const auto& query_imgs = pick->second;
    const std::size_t n_query = (query_imgs.size() + 1) / 2;
    for (std::size_t k = 0; k < query_imgs.size(); ++k) {
      if (k < n_query) {
        take(s.query, query_imgs[k], Split::query);
      } else if (opt.setting == Setting::standard) {
        take(s.gallery, query_imgs[k], Split::gallery);
      }
    }
    for (auto& [clothes, idxs] : test_pool) {
      if (clothes == pick->first) continue;
      for (auto idx : idxs) take(s.gallery, idx, Split::gallery);
    }
  }
  if (!any_test) throw DataError("empty test split (holdout_fraction too small)");
  return s;
}

/// Single manifest with every record tagged by its split (the on-disk form).
inline DatasetManifest merge_splits(const Splits& s) {
  auto out = detail::empty_like(s.train);
  for (const auto* part : {&s.train, &s.query, &s.gallery}) {
    out.records.insert(out.records.end(), part->records.begin(), part->records.end());
  }
  std::sort(out.records.begin(), out.records.end(),
            [](const SampleRecord& a, const SampleRecord& b) { return a.image_id < b.image_id; });
  return out;
}

/// Inverse of merge_splits for the given evaluation setting.
inline Splits splits_from_tags(const DatasetManifest& m, Setting setting) {
  Splits s{detail::empty_like(m), detail::empty_like(m), detail::empty_like(m)};
  for (const auto& r : m.records) {
    switch (r.split) {
      case Split::train: s.train.records.push_back(r); break;
      case Split::query: s.query.records.push_back(r); break;
      case Split::gallery: s.gallery.records.push_back(r); break;
    }
  }
  if (setting == Setting::clothes_changing) s.gallery = clothes_changing_gallery(s.query, s.gallery);
  return s;
}

// ---------------------------------------------------------------------------
// PK sampling

/// Identity-balanced batches: P identities x K images. Each identity's images
/// are shuffled and cut into K-sized chunks (sampling with replacement when
/// it has fewer than K); batches draw P distinct identities that still hold
/// a chunk until fewer than P remain.
class PkSampler {
 public:
  PkSampler(const DatasetManifest& train, int P, int K, std::uint64_t seed) : P_(P), K_(K), seed_(seed) {
    if (P < 1 || K < 1) throw ConfigError("P and K must be >= 1");
    for (std::size_t i = 0; i < train.records.size(); ++i) {
      by_identity_[train.records[i].identity_label].push_back(i);
    }
    if (static_cast<int>(by_identity_.size()) < P) {
      throw ConfigError("P=" + std::to_string(P) + " exceeds the " + std::to_string(by_identity_.size()) +
                        " identities in the training set");
    }
  }

  int batch_size() const { return P_ * K_; }

  /// Batches of record indices for one epoch; a pure function of (seed, epoch).
  std::vector<std::vector<std::size_t>> epoch_batches(int epoch) const {
    std::mt19937_64 rng(derive_seed(seed_, 0x9b, static_cast<std::uint64_t>(epoch)));
    std::map<int, std::vector<std::vector<std::size_t>>> chunks;
    for (const auto& [id, idxs] : by_identity_) {
      std::vector<std::size_t> pool = idxs;
      if (static_cast<int>(pool.size()) < K_) {
        std::uniform_int_distribution<std::size_t> pickd(0, idxs.size() - 1);
        pool.clear();
        for (int k = 0; k < K_; ++k) pool.push_back(idxs[pickd(rng)]);
      }
      std::shuffle(pool.begin(), pool.end(), rng);
      auto& c = chunks[id];
      for (std::size_t start = 0; start + static_cast<std::size_t>(K_) <= pool.size(); start += static_cast<std::size_t>(K_)) {
        c.emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(start),
                       pool.begin() + static_cast<std::ptrdiff_t>(start) + K_);
      }
    }
    std::vector<int> available;
    for (auto& [id, c] : chunks) available.push_back(id);
    std::vector<std::vector<std::size_t>> batches;
    while (static_cast<int>(available.size()) >= P_) {
      std::shuffle(available.begin(), available.end(), rng);
      std::vector<int> chosen(available.begin(), available.begin() + P_);
      std::sort(chosen.begin(), chosen.end());
      std::vector<std::size_t> batch;
      for (int id : chosen) {
        auto& c = chunks[id];
        batch.insert(batch.end(), c.front().begin(), c.front().end());
        c.erase(c.begin());
      }
      batches.push_back(std::move(batch));
      std::erase_if(available, [&](int id) { return chunks[id].empty(); });
      std::sort(available.begin(), available.end());
    }
    return batches;
  }

 private:
  int P_;
  int K_;
  std::uint64_t seed_;
  std::map<int, std::vector<std::size_t>> by_identity_;
};

// ---------------------------------------------------------------------------
// Augmentation

/// 3-channel float image, CHW, values nominally in [0, 1].
struct FloatImage {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  bool operator==(const FloatImage&) const = default;
};

inline FloatImage to_float(const io::RgbImage& img) {
  FloatImage out{3, img.height, img.width, std::vector<double>(static_cast<std::size_t>(img.height) * img.width * 3)};
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = img.at(y, x, c) / 255.0;
  return out;
}

struct AugmentConfig {
  int crop_padding = 4;
  double hflip_prob = 0.5;
  double erase_prob = 0.5;
  std::array<double, 2> erase_area_range{0.02, 0.2};

  void validate() const {
    if (crop_padding < 0) throw ConfigError("crop_padding must be >= 0");
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(hflip_prob) || !prob(erase_prob)) throw ConfigError("augmentation probabilities must be in [0, 1]");
    auto [lo, hi] = erase_area_range;
    if (!(lo > 0.0 && hi < 1.0 && lo <= hi)) throw ConfigError("erase_area_range must satisfy 0 < lo <= hi < 1");
  }
};

/// Random crop from a zero-padded canvas, horizontal flip, random erasing.
inline FloatImage augment(const FloatImage& in, const AugmentConfig& cfg, std::mt19937_64& rng) {
  const int H = in.height;
  const int W = in.width;
  FloatImage out = in;
  if (cfg.crop_padding > 0) {
    std::uniform_int_distribution<int> off(0, 2 * cfg.crop_padding);
    const int oy = off(rng) - cfg.crop_padding;
    const int ox = off(rng) - cfg.crop_padding;
    for (int c = 0; c < in.channels; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const int sy = y + oy;
          const int sx = x + ox;
          out.at(c, y, x) = (sy >= 0 && sy < H && sx >= 0 && sx < W) ? in.at(c, sy, sx) : 0.0;
        }
  }
  if (cfg.hflip_prob > 0.0 && std::bernoulli_distribution(cfg.hflip_prob)(rng)) {
    for (int c = 0; c < out.channels; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W / 2; ++x) std::swap(out.at(c, y, x), out.at(c, y, W - 1 - x));
  }
  if (cfg.erase_prob > 0.0 && std::bernoulli_distribution(cfg.erase_prob)(rng)) {
    const auto [lo, hi] = cfg.erase_area_range;
    std::uniform_real_distribution<double> area_d(lo, hi);
    std::uniform_real_distribution<double> log_ratio(std::log(0.3), std::log(1.0 / 0.3));
    std::uniform_real_distribution<double> fill(0.0, 1.0);
    const double total = static_cast<double>(H) * W;
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double area = area_d(rng) * total;
      const double ratio = std::exp(log_ratio(rng));
      const int h = static_cast<int>(std::lround(std::sqrt(area * ratio)));
      const int w = static_cast<int>(std::lround(std::sqrt(area / ratio)));
      const double frac = static_cast<double>(h) * w / total;
      if (h < 1 || w < 1 || h >= H || w >= W || frac < lo || frac > hi) continue;
      const int y0 = std::uniform_int_distribution<int>(0, H - h)(rng);
      const int x0 = std::uniform_int_distribution<int>(0, W - w)(rng);
      for (int c = 0; c < out.channels; ++c)
        for (int y = y0; y < y0 + h; ++y)
          for (int x = x0; x < x0 + w; ++x) out.at(c, y, x) = fill(rng);
      break;
    }
  }
  return out;
}

}  // namespace ccil::data
