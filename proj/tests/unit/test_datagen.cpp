#include <gtest/gtest.h>

#include <map>
#include <set>
#include <sstream>

#include "helpers.hpp"

using namespace ccil;
using namespace ccil::data;

namespace {

GeneratorConfig small_gen(std::uint64_t seed = 3) {
  GeneratorConfig g;
  g.n_identities = 5;
  g.images_per_outfit = 4;
  g.seed = seed;
  return g;
}

}  // namespace

TEST(Datagen, DefaultCounts) {
  GeneratorConfig g;  // 20 identities, 2 outfits each, 20 images per outfit
  const auto ds = generate_synthetic_dataset(g);
  EXPECT_EQ(ds.manifest.n_identities, 20);
  EXPECT_EQ(ds.manifest.n_clothes, 40);
  EXPECT_EQ(ds.manifest.records.size(), 800u);
  EXPECT_EQ(ds.images.size(), 800u);
  for (const auto& [id, img] : ds.images) {
    ASSERT_EQ(img.height, 64);
    ASSERT_EQ(img.width, 32);
  }
}

TEST(Datagen, ArithmeticForOtherCounts) {
  GeneratorConfig g;
  g.n_identities = 20;
  g.images_per_outfit = 10;
  const auto ds = generate_synthetic_dataset(g);
  EXPECT_EQ(ds.manifest.n_clothes, 40);
  EXPECT_EQ(ds.manifest.records.size(), 400u);
}

TEST(Datagen, MinimalCase) {
  GeneratorConfig g;
  g.n_identities = 1;
  g.images_per_outfit = 1;
  g.n_cams = 1;
  g.seed = 0;
  const auto ds = generate_synthetic_dataset(g);
  ASSERT_EQ(ds.manifest.records.size(), 2u);
  std::set<int> clothes;
  for (const auto& r : ds.manifest.records) {
    EXPECT_EQ(r.identity_label, 0);
    clothes.insert(r.clothes_label);
  }
  EXPECT_EQ(clothes, (std::set<int>{0, 1}));
}

TEST(Datagen, RejectsSingleOutfit) {
  GeneratorConfig g = small_gen();
  g.clothes_per_identity = 1;
  EXPECT_THROW(generate_synthetic_dataset(g), ConfigError);
  g.clothes_per_identity = 2;
  g.n_identities = 0;
  EXPECT_THROW(generate_synthetic_dataset(g), ConfigError);
}

TEST(Datagen, Deterministic) {
  const auto a = generate_synthetic_dataset(small_gen(11));
  const auto b = generate_synthetic_dataset(small_gen(11));
  EXPECT_EQ(a.manifest, b.manifest);
  EXPECT_EQ(a.images, b.images);
  const auto c = generate_synthetic_dataset(small_gen(12));
  EXPECT_NE(a.images, c.images);
}

TEST(Datagen, ClothesDetermineIdentity) {
  const auto ds = generate_synthetic_dataset(small_gen());
  std::map<int, int> owner;
  std::map<int, std::set<int>> outfits;
  for (const auto& r : ds.manifest.records) {
    auto [it, fresh] = owner.emplace(r.clothes_label, r.identity_label);
    EXPECT_EQ(it->second, r.identity_label);
    outfits[r.identity_label].insert(r.clothes_label);
    EXPECT_GE(r.camera_id, 0);
    EXPECT_LT(r.camera_id, ds.manifest.n_cams);
  }
  for (const auto& [id, o] : outfits) EXPECT_GE(o.size(), 2u);
  EXPECT_NO_THROW(validate_manifest(ds.manifest, true));
}

TEST(Datagen, ValidateRejectsSharedClothes) {
  auto m = generate_synthetic_dataset(small_gen()).manifest;
  m.records[0].clothes_label = m.records.back().clothes_label;
  EXPECT_THROW(validate_manifest(m, false), DataError);
}

TEST(Datagen, ManifestRoundTrip) {
  auto ds = generate_synthetic_dataset(small_gen());
  ds.manifest = merge_splits(make_splits(ds.manifest, {Setting::standard, 0.5, 1, false}));
  std::stringstream ss;
  write_manifest(ss, ds.manifest);
  const std::string text = ss.str();
  EXPECT_EQ(text.rfind("#ccil-manifest v1 N=5 M=10 CAMS=3 SEED=3", 0), 0u);
  std::istringstream in(text);
  EXPECT_EQ(read_manifest(in), ds.manifest);
}

TEST(Datagen, DatasetDiskRoundTrip) {
  const auto ds = generate_synthetic_dataset(small_gen());
  const auto dir = tu::scratch_dir("dataset_roundtrip");
  save_dataset(dir, ds.manifest, ds.images);
  const auto back = load_dataset(dir);
  EXPECT_EQ(back.manifest, ds.manifest);
  EXPECT_EQ(back.images, ds.images);
}

TEST(Datagen, MalformedManifestRejected) {
  std::istringstream bad("#ccil-manifest v1 N=1 M=2 CAMS=1 SEED=0\np000_c000_000,0,5,0,train\n");
  EXPECT_THROW(read_manifest(bad), DataError);
  std::istringstream header("not a manifest\n");
  EXPECT_THROW(read_manifest(header), DataError);
}

TEST(Splits, ClothesChangingGalleryHasOtherOutfit) {
  const auto ds = generate_synthetic_dataset(small_gen());
  const auto s = make_splits(ds.manifest, {Setting::clothes_changing, 0.5, 4, false});
  ASSERT_FALSE(s.query.records.empty());
  for (const auto& q : s.query.records) {
    bool found = false;
    for (const auto& g : s.gallery.records) {
      if (g.identity_label == q.identity_label) {
        EXPECT_NE(g.clothes_label, q.clothes_label);
        found = true;
      }
    }
    EXPECT_TRUE(found) << q.image_id;
  }
}

TEST(Splits, DisjointAndComplete) {
  const auto ds = generate_synthetic_dataset(small_gen());
  const auto s = make_splits(ds.manifest, {Setting::standard, 0.5, 4, false});
  std::set<std::string> seen;
  for (const auto* part : {&s.train, &s.query, &s.gallery})
    for (const auto& r : part->records) EXPECT_TRUE(seen.insert(r.image_id).second) << r.image_id;
  EXPECT_EQ(seen.size(), ds.manifest.records.size());
  std::set<int> train_ids, test_ids;
  for (const auto& r : s.train.records) train_ids.insert(r.identity_label);
  for (const auto& r : s.query.records) test_ids.insert(r.identity_label);
  EXPECT_EQ(train_ids, test_ids);  // closed set
}

TEST(Splits, StandardKeepsSameClothes) {
  const auto ds = generate_synthetic_dataset(small_gen());
  const auto s = make_splits(ds.manifest, {Setting::standard, 0.5, 4, false});
  bool same_clothes_pair = false;
  for (const auto& q : s.query.records)
    for (const auto& g : s.gallery.records)
      same_clothes_pair |= g.identity_label == q.identity_label && g.clothes_label == q.clothes_label;
  EXPECT_TRUE(same_clothes_pair);
  const auto cc = clothes_changing_gallery(s.query, s.gallery);
  for (const auto& q : s.query.records)
    for (const auto& g : cc.records)
      EXPECT_FALSE(g.identity_label == q.identity_label && g.clothes_label == q.clothes_label);
}

TEST(Splits, MinimalTwoImageManifest) {
  GeneratorConfig g;
  g.n_identities = 1;
  g.images_per_outfit = 1;
  g.n_cams = 1;
  g.seed = 0;
  const auto ds = generate_synthetic_dataset(g);
  const auto s = make_splits(ds.manifest, {Setting::clothes_changing, 1.0, 0, false});
  ASSERT_EQ(s.query.records.size(), 1u);
  ASSERT_EQ(s.gallery.records.size(), 1u);
  EXPECT_TRUE(s.train.records.empty());
  EXPECT_NE(s.query.records[0].clothes_label, s.gallery.records[0].clothes_label);
}

TEST(Splits, ZeroHoldoutIsAnError) {
  const auto ds = generate_synthetic_dataset(small_gen());
  EXPECT_THROW(make_splits(ds.manifest, {Setting::clothes_changing, 0.0, 0, false}), DataError);
  EXPECT_THROW(make_splits(ds.manifest, {Setting::clothes_changing, 1.5, 0, false}), ConfigError);
}

TEST(Splits, SingleTestOutfitRejected) {
  auto m = generate_synthetic_dataset(small_gen()).manifest;
  // identity 0 is left with a single outfit
  std::erase_if(m.records, [](const SampleRecord& r) { return r.clothes_label == 0; });
  EXPECT_THROW(make_splits(m, {Setting::clothes_changing, 0.5, 0, false}), DataError);
}

TEST(Splits, TagsRoundTrip) {
  const auto ds = generate_synthetic_dataset(small_gen());
  const auto s = make_splits(ds.manifest, {Setting::standard, 0.5, 9, false});
  const auto back = splits_from_tags(merge_splits(s), Setting::standard);
  EXPECT_EQ(back.train.records.size(), s.train.records.size());
  EXPECT_EQ(back.query.records.size(), s.query.records.size());
  EXPECT_EQ(back.gallery.records.size(), s.gallery.records.size());
}

TEST(Splits, OpenSetHoldsOutIdentities) {
  const auto ds = generate_synthetic_dataset(small_gen());
  const auto s = make_splits(ds.manifest, {Setting::clothes_changing, 0.4, 2, true});
  std::set<int> train_ids, test_ids;
  for (const auto& r : s.train.records) train_ids.insert(r.identity_label);
  for (const auto& r : s.query.records) test_ids.insert(r.identity_label);
  EXPECT_EQ(test_ids.size(), 2u);
  for (int id : test_ids) EXPECT_EQ(train_ids.count(id), 0u);
}

TEST(PkSampler, BatchComposition) {
  const auto ds = generate_synthetic_dataset(small_gen());
  const PkSampler sampler(ds.manifest, 3, 2, 5);
  EXPECT_EQ(sampler.batch_size(), 6);
  const auto batches = sampler.epoch_batches(0);
  ASSERT_FALSE(batches.empty());
  for (const auto& b : batches) {
    ASSERT_EQ(b.size(), 6u);
    std::map<int, int> count;
    for (auto i : b) ++count[ds.manifest.records[i].identity_label];
    EXPECT_EQ(count.size(), 3u);
    for (auto [id, n] : count) EXPECT_EQ(n, 2);
  }
}

TEST(PkSampler, PaperBatchOf64) {
  const auto ds = generate_synthetic_dataset(GeneratorConfig{});
  const PkSampler sampler(ds.manifest, 8, 8, 1);
  for (const auto& b : sampler.epoch_batches(3)) EXPECT_EQ(b.size(), 64u);
}

TEST(PkSampler, TwoIdentitiesOnce) {
  GeneratorConfig g;
  g.n_identities = 2;
  g.images_per_outfit = 1;
  const auto ds = generate_synthetic_dataset(g);
  const PkSampler sampler(ds.manifest, 2, 1, 0);
  const auto batches = sampler.epoch_batches(0);
  ASSERT_FALSE(batches.empty());
  for (const auto& b : batches) {
    ASSERT_EQ(b.size(), 2u);
    EXPECT_NE(ds.manifest.records[b[0]].identity_label, ds.manifest.records[b[1]].identity_label);
  }
}

TEST(PkSampler, SamplesWithReplacementWhenShort) {
  GeneratorConfig g;
  g.n_identities = 3;
  g.images_per_outfit = 1;  // two images per identity
  const auto ds = generate_synthetic_dataset(g);
  const PkSampler sampler(ds.manifest, 2, 4, 0);
  const auto batches = sampler.epoch_batches(0);
  ASSERT_FALSE(batches.empty());
  for (const auto& b : batches) EXPECT_EQ(b.size(), 8u);
}

TEST(PkSampler, DeterministicAndRejectsLargeP) {
  const auto ds = generate_synthetic_dataset(small_gen());
  const PkSampler a(ds.manifest, 2, 2, 42), b(ds.manifest, 2, 2, 42);
  EXPECT_EQ(a.epoch_batches(4), b.epoch_batches(4));
  EXPECT_NE(a.epoch_batches(4), a.epoch_batches(5));
  EXPECT_THROW(PkSampler(ds.manifest, 6, 2, 0), ConfigError);
}

TEST(Augment, IdentityWhenDisabled) {
  const auto img = tu::random_images(1, 16, 8, 1)[0];
  AugmentConfig c{0, 0.0, 0.0, {0.02, 0.2}};
  std::mt19937_64 rng(1);
  EXPECT_EQ(augment(img, c, rng), img);
}

TEST(Augment, FlipTwiceIsIdentity) {
  const auto img = tu::random_images(1, 16, 8, 2)[0];
  AugmentConfig c{0, 1.0, 0.0, {0.02, 0.2}};
  std::mt19937_64 rng(2);
  const auto once = augment(img, c, rng);
  EXPECT_NE(once, img);
  EXPECT_EQ(once.at(0, 3, 0), img.at(0, 3, 7));
  EXPECT_EQ(augment(once, c, rng), img);
}

TEST(Augment, ErasingAreaWithinRange) {
  const auto img = tu::random_images(1, 64, 32, 3)[0];
  AugmentConfig c{0, 0.0, 1.0, {0.05, 0.2}};
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto out = augment(img, c, rng);
    int min_y = 64, max_y = -1, min_x = 32, max_x = -1, changed = 0;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 32; ++x) {
        bool diff = false;
        for (int ch = 0; ch < 3; ++ch) diff |= out.at(ch, y, x) != img.at(ch, y, x);
        if (!diff) continue;
        ++changed;
        min_y = std::min(min_y, y), max_y = std::max(max_y, y);
        min_x = std::min(min_x, x), max_x = std::max(max_x, x);
      }
    ASSERT_GT(changed, 0);
    // random fill can coincide with the original pixel, so measure the box
    const double box = static_cast<double>((max_y - min_y + 1) * (max_x - min_x + 1)) / (64.0 * 32.0);
    EXPECT_LE(box, 0.2 + 1e-12);
    EXPECT_GE(static_cast<double>(changed) / (64.0 * 32.0), 0.05 * 0.9);
  }
}

TEST(Augment, ShapePreservedAndConfigValidated) {
  const auto img = tu::random_images(1, 16, 8, 4)[0];
  AugmentConfig c;
  std::mt19937_64 rng(4);
  const auto out = augment(img, c, rng);
  EXPECT_EQ(out.height, 16);
  EXPECT_EQ(out.width, 8);
  EXPECT_EQ(out.data.size(), img.data.size());
  c.hflip_prob = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c.hflip_prob = 0.5;
  c.erase_area_range = {0.3, 0.1};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(PngIo, RoundTrip) {
  io::RgbImage img{5, 3, {}};
  for (int i = 0; i < 45; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 5));
  const auto dir = tu::scratch_dir("png");
  io::write_png(dir / "a.png", img);
  EXPECT_EQ(io::read_png(dir / "a.png"), img);
}
