#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include "vistill/data/corpus.hpp"
#include "vistill/io/png.hpp"

using namespace vistill;
using namespace vistill::data;

TEST_CASE("sha256 matches the standard vectors", "[corpus][sha]") {
  CHECK(io::sha256_hex(std::string{}) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(io::sha256_hex(std::string{"abc"}) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  std::string two_blocks(120, 'a');
  io::Sha256 h;
  h.update(two_blocks);
  CHECK(h.hexdigest() == io::sha256_hex(two_blocks));
}

TEST_CASE("corpus images are deterministic functions of seed and index", "[corpus]") {
  Corpus c({.count = 16}, 42);
  auto a = c.image(7);
  auto b = c.image(7);
  CHECK(a.chw == b.chw);
  Corpus c2({.count = 16}, 43);
  CHECK(c.image(7).chw != c2.image(7).chw);
}

TEST_CASE("corpus pixel values stay within [0,1]", "[corpus]") {
  Corpus c({.count = 8}, 3);
  for (int64_t i = 0; i < 8; ++i) {
    auto img = c.image(i);
    float lo = 1e9f, hi = -1e9f;
    for (float v : img.chw) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    CHECK(lo >= 0.f);
    CHECK(hi <= 1.f);
  }
}

TEST_CASE("80/20 split yields disjoint train and heldout sets", "[corpus]") {
  Corpus c({.count = 1000, .heldout_fraction = 0.2}, 1);
  CHECK(c.train_count() == 800);
  CHECK(c.heldout_count() == 200);
  auto tr = c.train_indices();
  auto he = c.heldout_indices();
  CHECK(tr.size() == 800);
  CHECK(he.size() == 200);
  CHECK(tr.back() < he.front());  // contiguous disjoint ranges
}

TEST_CASE("labels agree with the rendered primary shape", "[corpus]") {
  Corpus c({.count = 32}, 9);
  for (int64_t i = 0; i < 32; ++i) {
    CorpusLabels lab_only = c.labels(i);
    CorpusLabels lab_full;
    auto img = c.image_with_labels(i, lab_full);
    CHECK(lab_only.shape_class == lab_full.shape_class);
    CHECK(lab_only.color_index == lab_full.color_index);
    CHECK(lab_only.cx == lab_full.cx);
    CHECK(lab_only.cy == lab_full.cy);
    CHECK(lab_only.cx >= 0.f);
    CHECK(lab_only.cx <= 1.f);
    // primary drawn on top: centre pixel should match the labelled color
    const auto& col = c.spec().palette[static_cast<size_t>(lab_full.color_index)];
    const auto kind = c.spec().vocab[static_cast<size_t>(lab_full.shape_class)];
    if (kind != ShapeKind::Ring) {  // ring centre is hollow
      const int64_t px = static_cast<int64_t>(lab_full.cx * 64), py = static_cast<int64_t>(lab_full.cy * 64);
      const float dr = std::abs(img.at(0, py, px) - col.r) + std::abs(img.at(1, py, px) - col.g) +
                       std::abs(img.at(2, py, px) - col.b);
      CHECK(dr < 0.25f);
    }
  }
}

TEST_CASE("degenerate corpus specs are rejected", "[corpus]") {
  CorpusSpec s;
  s.palette.clear();
  CHECK_THROWS_AS(Corpus(s, 1), ConfigError);
  CorpusSpec s2;
  s2.count = 1;
  CHECK_THROWS_AS(Corpus(s2, 1), ConfigError);
}

TEST_CASE("corpus fingerprint tracks spec and seed", "[corpus]") {
  Corpus a({.count = 16}, 5);
  Corpus b({.count = 16}, 5);
  CHECK(a.fingerprint() == b.fingerprint());
  Corpus c({.count = 17}, 5);
  CHECK(a.fingerprint() != c.fingerprint());
  Corpus d({.count = 16}, 6);
  CHECK(a.fingerprint() != d.fingerprint());
}

TEST_CASE("png export writes deterministic parseable files", "[corpus][png]") {
  Corpus c({.count = 4}, 11);
  const std::string path = "/tmp/vistill_test_corpus.png";
  io::write_png_rgb(path, c.image(0));
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  REQUIRE(bytes.size() > 16);
  CHECK(static_cast<unsigned char>(bytes[0]) == 0x89);
  CHECK(bytes[1] == 'P');
  io::write_png_rgb(path, c.image(0));
  std::ifstream f2(path, std::ios::binary);
  std::vector<char> bytes2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(bytes == bytes2);
  std::remove(path.c_str());
}

TEST_CASE("crop-resize and hflip augmentations preserve range", "[corpus]") {
  Corpus c({.count = 2}, 13);
  auto img = c.image(1);
  auto cropped = crop_resize(img, 4.f, 6.f, 60.f, 62.f, 64, 64);
  CHECK(cropped.h == 64);
  float lo = 1e9f, hi = -1e9f;
  for (float v : cropped.chw) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo >= 0.f);
  CHECK(hi <= 1.f);
  auto flipped = img;
  hflip_inplace(flipped);
  CHECK(flipped.at(0, 10, 3) == img.at(0, 10, 60));
  hflip_inplace(flipped);
  CHECK(flipped.chw == img.chw);
}
