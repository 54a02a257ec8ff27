#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "pgunet/data.hpp"
#include "pgunet/herlev.hpp"
#include "pgunet/image_io.hpp"
#include "temp_dir.hpp"

using namespace pgu;

namespace {

void check_normalized(const Tensor& image) {
  const std::size_t plane = image.dim(1) * image.dim(2);
  for (std::size_t c = 0; c < image.dim(0); ++c) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < plane; ++i) mean += image.at(c * plane + i);
    mean /= plane;
    for (std::size_t i = 0; i < plane; ++i) sq += (image.at(c * plane + i) - mean) * (image.at(c * plane + i) - mean);
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(std::sqrt(sq / plane) - 1.0) < 1e-3);
  }
}

std::vector<std::uint8_t> disk_mask(std::size_t r, double radius, std::uint8_t label) {
  std::vector<std::uint8_t> mask(r * r, 0);
  const double c = r / 2.0;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < r; ++j) {
      const double dy = i + 0.5 - c, dx = j + 0.5 - c;
      if (dx * dx + dy * dy <= radius * radius) mask[i * r + j] = label;
    }
  return mask;
}

std::set<std::uint8_t> values_of(const std::vector<std::uint8_t>& v) { return {v.begin(), v.end()}; }

RgbImage paint(std::size_t r, const std::vector<std::uint8_t>& mask, const std::array<Rgb, 4>& colors) {
  RgbImage img{r, r, std::vector<std::uint8_t>(3 * r * r)};
  for (std::size_t i = 0; i < r * r; ++i)
    for (std::size_t c = 0; c < 3; ++c) img.pixels[i * 3 + c] = colors[mask[i]][c];
  return img;
}

RgbImage photo(std::size_t r, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  RgbImage img{r, r, std::vector<std::uint8_t>(3 * r * r)};
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() % 256);
  return img;
}

}  // namespace

TEST_CASE("normalize_channels") {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> d(5.0f, 3.0f);
  std::vector<float> chw(3 * 20 * 20);
  for (auto& v : chw) v = d(rng);
  std::fill(chw.begin() + 800, chw.end(), 0.25f);  // constant third channel
  normalize_channels(chw, 3);
  auto t = Tensor::from_data({3, 20, 20}, chw);
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0, sq = 0;
    for (std::size_t i = 0; i < 400; ++i) mean += chw[c * 400 + i];
    mean /= 400;
    for (std::size_t i = 0; i < 400; ++i) sq += (chw[c * 400 + i] - mean) * (chw[c * 400 + i] - mean);
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(std::sqrt(sq / 400) - 1.0) < 1e-3);
  }
  CHECK(std::all_of(chw.begin() + 800, chw.end(), [](float v) { return v == 0.0f; }));
  CHECK_THROWS_AS(normalize_channels(chw, 7), ShapeError);
}

TEST_CASE("classify_nucleus_size") {
  std::vector<std::uint8_t> mask(256 * 256, 1);
  std::fill(mask.begin(), mask.begin() + 100, 2);
  CHECK(classify_nucleus_size(mask, 256, 2000) == NucleusSize::kSmall);
  std::fill(mask.begin(), mask.begin() + 5000, 3);
  CHECK(classify_nucleus_size(mask, 256, 2000) == NucleusSize::kLarge);
  CHECK(classify_nucleus_size(mask, 256, 5000) == NucleusSize::kSmall);  // strictly greater than T

  // T is given at 256 px and scaled by area.
  std::vector<std::uint8_t> small(64 * 64, 0);
  std::fill(small.begin(), small.begin() + 126, 2);
  CHECK(classify_nucleus_size(small, 64, 2000) == NucleusSize::kLarge);
  std::fill(small.begin() + 125, small.end(), 0);
  CHECK(classify_nucleus_size(small, 64, 2000) == NucleusSize::kSmall);

  CHECK_THROWS_AS(classify_nucleus_size(std::vector<std::uint8_t>(256 * 256, 1), 256), DataError);
  CHECK_THROWS_AS(classify_nucleus_size(mask, 128), ShapeError);

  relabel_nuclei(mask, NucleusSize::kSmall);
  CHECK(values_of(mask) == std::set<std::uint8_t>{1, 2});
}

TEST_CASE("raising the size threshold never turns small into large") {
  std::vector<std::vector<std::uint8_t>> masks;
  for (std::size_t k = 0; k < 40; ++k) masks.push_back(synth_render(k, 256, 17).mask);
  std::vector<bool> previous(masks.size(), true);
  for (double t = 0; t <= 8000; t += 250) {
    for (std::size_t k = 0; k < masks.size(); ++k) {
      const bool large = classify_nucleus_size(masks[k], 256, t) == NucleusSize::kLarge;
      CHECK_FALSE((large && !previous[k]));
      previous[k] = large;
    }
  }
}

TEST_CASE("resample") {
  auto data = synth_generate(4, 256, 5);

  SUBCASE("to the same resolution is the identity") {
    auto same = resample(data, 256);
    for (std::size_t k = 0; k < data.size(); ++k) {
      CHECK(std::equal(same.samples[k].image.data().begin(), same.samples[k].image.data().end(),
                       data.samples[k].image.data().begin()));
      CHECK(same.samples[k].mask == data.samples[k].mask);
    }
  }
  SUBCASE("class ids survive and images stay normalized") {
    for (std::size_t target : {32, 64, 128}) {
      auto down = resample(data, target);
      CHECK(down.resolution == target);
      CHECK_NOTHROW(down.validate());
      for (std::size_t k = 0; k < data.size(); ++k) {
        const auto before = values_of(data.samples[k].mask);
        for (auto v : values_of(down.samples[k].mask)) CHECK(before.count(v) == 1);
        check_normalized(down.samples[k].image);
        CHECK(down.samples[k].nucleus_size == data.samples[k].nucleus_size);
      }
    }
  }
  SUBCASE("invalid targets") {
    CHECK_THROWS_AS(resample(data, 48), DataError);
    CHECK_THROWS_AS(resample(data, 16), DataError);
    CHECK_THROWS_AS(resample(data, 512), DataError);
  }
}

TEST_CASE("a 128 px disk resamples to a 32 px disk") {
  const auto mask = disk_mask(256, 64.0, 2);
  std::vector<float> rgb(3 * 256 * 256);
  for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = static_cast<float>(mask[i % (256 * 256)]);
  Dataset d;
  d.resolution = 256;
  d.samples.push_back(make_sample(rgb, mask, 256, "disk"));
  auto down = resample(d, 64);
  const auto big = std::count(mask.begin(), mask.end(), 2);
  const auto small = std::count_if(down.samples[0].mask.begin(), down.samples[0].mask.end(),
                                   [](std::uint8_t v) { return v >= 2; });
  const double ratio = static_cast<double>(small) / static_cast<double>(big);
  CHECK(std::abs(ratio / (1.0 / 16.0) - 1.0) < 0.1);
}

TEST_CASE("split") {
  auto data = synth_generate(10, 32, 1);
  auto parts = split(data, {}, 42);
  CHECK(parts.train.size() == 8);
  CHECK(parts.val.size() == 1);
  CHECK(parts.test.size() == 1);
  CHECK(parts.train.split == SplitTag::kTrain);

  std::set<std::string> all;
  std::size_t total = 0;
  for (const Dataset* p : {&parts.train, &parts.val, &parts.test}) {
    for (const auto& s : p->samples) all.insert(s.source_id);
    total += p->size();
  }
  CHECK(total == 10);
  CHECK(all.size() == 10);  // pairwise disjoint
  std::set<std::string> original;
  for (const auto& s : data.samples) original.insert(s.source_id);
  CHECK(all == original);

  auto ids = [](const Dataset& d) {
    std::vector<std::string> out;
    for (const auto& s : d.samples) out.push_back(s.source_id);
    return out;
  };
  auto again = split(data, {}, 42);
  CHECK(ids(again.train) == ids(parts.train));
  CHECK(ids(again.test) == ids(parts.test));

  // input order does not matter, only the ids
  Dataset reversed = data;
  std::reverse(reversed.samples.begin(), reversed.samples.end());
  CHECK(ids(split(reversed, {}, 42).train) == ids(parts.train));

  CHECK_THROWS_AS(split(Dataset{}, {}, 1), DataError);
  CHECK_THROWS_AS(split(data, {0.5, 0.5, 0.0}, 1), ConfigError);
  CHECK_THROWS_AS(split(data, {0.5, 0.3, 0.3}, 1), ConfigError);
}

TEST_CASE("synth_generate") {
  auto data = synth_generate(200, 64, 9);
  CHECK_NOTHROW(data.validate());
  std::size_t large = 0;
  for (const auto& s : data.samples) {
    const std::size_t r = 64;
    CHECK(std::count_if(s.mask.begin(), s.mask.end(), [](auto v) { return v >= 2; }) >= 1);
    for (auto v : s.mask) CHECK(v <= 3);
    // nucleus inside cytoplasm: no nucleus pixel touches background
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < r; ++j) {
        if (s.mask[i * r + j] < 2) continue;
        const std::pair<int, int> nbrs[] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
        for (auto [di, dj] : nbrs) {
          const int ii = int(i) + di, jj = int(j) + dj;
          REQUIRE(ii >= 0);
          REQUIRE(jj >= 0);
          REQUIRE(ii < int(r));
          REQUIRE(jj < int(r));
          CHECK(s.mask[ii * r + jj] != 0);
        }
      }
    check_normalized(s.image);
    large += s.nucleus_size == NucleusSize::kLarge;
  }
  CHECK(large > 0);
  CHECK(large < 200);

  auto again = synth_generate(200, 64, 9);
  for (std::size_t k = 0; k < 200; ++k) {
    CHECK(again.samples[k].mask == data.samples[k].mask);
    CHECK(std::equal(again.samples[k].image.data().begin(), again.samples[k].image.data().end(),
                     data.samples[k].image.data().begin()));
  }
  CHECK_THROWS_AS(synth_generate(0, 64, 1), DataError);
}

TEST_CASE("synthetic nuclei are separated from the background at 32 px") {
  auto data = synth_generate(100, 32, 4);
  for (const auto& s : data.samples) {
    for (std::size_t i = 1; i + 1 < 32; ++i)
      for (std::size_t j = 1; j + 1 < 32; ++j) {
        if (s.mask[i * 32 + j] < 2) continue;
        CHECK(s.mask[(i - 1) * 32 + j] != 0);
        CHECK(s.mask[(i + 1) * 32 + j] != 0);
        CHECK(s.mask[i * 32 + j - 1] != 0);
        CHECK(s.mask[i * 32 + j + 1] != 0);
      }
  }
}

TEST_CASE("make_batch") {
  auto data = synth_generate(3, 32, 2);
  auto batch = make_batch(data, {2, 0});
  CHECK(batch.images.shape() == Shape{2, 3, 32, 32});
  CHECK(batch.labels.size() == 2 * 32 * 32);
  CHECK(std::equal(data.samples[2].mask.begin(), data.samples[2].mask.end(), batch.labels.begin()));
  CHECK(batch.images.at(3 * 32 * 32) == data.samples[0].image.at(0));
  CHECK_THROWS_AS(make_batch(data, {}), DataError);
}

TEST_CASE("paletted PNG round trip") {
  TempDir dir;
  PalettedImage img{5, 3, {0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2}, {kClassPalette.begin(), kClassPalette.end()}};
  write_paletted_png(dir / "p.png", img);
  auto back = read_paletted_png(dir / "p.png");
  CHECK(back.width == 5);
  CHECK(back.height == 3);
  CHECK(back.indices == img.indices);
  CHECK(back.palette == img.palette);
  img.indices[0] = 9;
  CHECK_THROWS_AS(write_paletted_png(dir / "q.png", img), ShapeError);
  CHECK_THROWS_AS(read_paletted_png(dir / "missing.png"), DataError);
}

TEST_CASE("load_herlev") {
  TempDir dir;
  const std::array<Rgb, 4> colors{kClassPalette[0], kClassPalette[1], kClassPalette[2], Rgb{128, 128, 128}};
  // class 3 in these fixtures paints the unknown region
  auto base = disk_mask(64, 24, 1);
  auto with_nucleus = base;
  for (std::size_t i = 0; i < 64 * 64; ++i) {
    if (disk_mask(64, 8, 2)[i]) with_nucleus[i] = 2;
  }
  auto with_unknown = with_nucleus;
  for (std::size_t i = 0; i < 64 * 6; ++i) with_unknown[i] = 3;

  write_rgb(dir / "a.bmp", photo(64, 1));
  write_rgb(dir / "a-d.bmp", paint(64, with_unknown, colors));
  write_rgb(dir / "b.png", photo(80, 2));  // non-square source
  std::filesystem::create_directories(dir / "masks");
  write_rgb(dir / "masks" / "b.png", paint(80, disk_mask(80, 20, 2), colors));
  write_rgb(dir / "c.png", photo(64, 3));
  write_rgb(dir / "c-d.png", paint(64, with_nucleus, colors));

  SUBCASE("fixture directory") {
    auto load = load_herlev(dir.path());
    CHECK(load.rejected.empty());
    REQUIRE(load.dataset.size() == 3);
    CHECK_NOTHROW(load.dataset.validate());
    CHECK(load.dataset.resolution == 256);
    std::set<std::string> ids;
    for (const auto& s : load.dataset.samples) {
      ids.insert(s.source_id);
      CHECK(s.resolution() == 256);
      check_normalized(s.image);
      for (auto v : s.mask) CHECK(v <= 3);
    }
    CHECK(ids == std::set<std::string>{"a", "b", "c"});
    // the unknown band of "a" (top 6 rows at 64 px = 24 rows at 256) is background
    const auto& a = load.dataset.samples[0];
    CHECK(std::all_of(a.mask.begin(), a.mask.begin() + 24 * 256, [](auto v) { return v == 0; }));
    CHECK(values_of(a.mask).count(1) == 1);
  }
  SUBCASE("nucleus-free sample is rejected with a diagnostic") {
    write_rgb(dir / "d.png", photo(64, 4));
    write_rgb(dir / "d-d.png", paint(64, base, colors));
    auto load = load_herlev(dir.path());
    CHECK(load.dataset.size() == 3);
    REQUIRE(load.rejected.size() == 1);
    CHECK(load.rejected[0].find("d:") == 0);
  }
  SUBCASE("missing companion") {
    write_rgb(dir / "e.png", photo(64, 5));
    CHECK_THROWS_AS(load_herlev(dir.path()), DataError);
  }
  SUBCASE("unmappable color") {
    auto odd = paint(64, with_nucleus, colors);
    odd.pixels[0] = 17;
    write_rgb(dir / "c-d.png", odd);
    CHECK_THROWS_WITH_AS(load_herlev(dir.path()), doctest::Contains("color table"), DataError);
  }
  SUBCASE("unreadable image") {
    std::ofstream(dir / "f.png") << "not an image";
    write_rgb(dir / "f-d.png", paint(64, with_nucleus, colors));
    CHECK_THROWS_AS(load_herlev(dir.path()), DataError);
  }
  SUBCASE("custom color table") {
    HerlevOptions options;
    options.colors.colors.clear();
    options.colors.colors[kClassPalette[0]] = Region::kBackground;
    options.colors.colors[kClassPalette[1]] = Region::kNucleus;
    options.colors.colors[kClassPalette[2]] = Region::kNucleus;
    options.colors.colors[Rgb{128, 128, 128}] = Region::kCytoplasm;
    auto load = load_herlev(dir.path(), options);
    CHECK(values_of(load.dataset.samples[0].mask).count(1) == 1);  // the former unknown band
  }
  CHECK_THROWS_AS(load_herlev(dir / "nope"), DataError);
}

TEST_CASE("parse_region") {
  CHECK(parse_region("Nucleus") == Region::kNucleus);
  CHECK(parse_region("unknown") == Region::kUnknown);
  CHECK_THROWS_AS(parse_region("cell"), ConfigError);
}

TEST_CASE("prepare_image follows the ingestion path") {
  TempDir dir;
  auto img = synth_render(0, 256, 3);
  std::vector<std::uint8_t> mask = img.mask;
  write_sample_pair(dir.path(), "s", img.rgb, mask, 256);
  auto load = load_herlev(dir.path());
  REQUIRE(load.dataset.size() == 1);
  CHECK(load.dataset.samples[0].mask == [&] {
    auto m = mask;
    relabel_nuclei(m, load.dataset.samples[0].nucleus_size);
    return m;
  }());
  auto direct = prepare_image(read_rgb(dir / "s.png"), 64);
  auto via_dataset = resample(load.dataset, 64);
  CHECK(direct.shape() == Shape{1, 3, 64, 64});
  for (std::size_t i = 0; i < direct.numel(); ++i) {
    CHECK(direct.at(i) == doctest::Approx(via_dataset.samples[0].image.at(i)).epsilon(1e-5));
  }
}
