#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "vistill/nn/encoder.hpp"

using namespace vistill;
using namespace vistill::nn;

namespace {

Var<float> random_images(int64_t b, int64_t res, uint64_t seed) {
  RngStream rng(seed);
  auto img = make_var<float>({b, 3, res, res});
  for (auto& v : img->data) v = static_cast<float>(rng.uniform());
  return img;
}

}  // namespace

TEST_CASE("cnn encoder emits [B, D_out] features", "[encoders]") {
  auto cfg = student_cnn_config(64);
  cfg.feature_dim = 64;  // native width, no projection
  auto enc = build_encoder<float>(cfg, 1);
  CHECK_FALSE(enc.config.needs_projection());
  Graph<float> g;
  g.set_grad_enabled(false);
  auto feat = encode(g, enc, random_images(2, 64, 3));
  CHECK(feat->shape == Dims{2, 64});
}

TEST_CASE("vit encoder emits the CLS feature", "[encoders]") {
  EncoderConfig cfg{.family = Family::Vit, .width = 64, .depth = 4, .patch_size = 8, .heads = 4,
                    .feature_dim = 64, .input_resolution = 64};
  auto enc = build_encoder<float>(cfg, 1);
  Graph<float> g;
  g.set_grad_enabled(false);
  auto feat = encode(g, enc, random_images(2, 64, 5));
  CHECK(feat->shape == Dims{2, 64});
}

TEST_CASE("same seed builds identical parameters", "[encoders]") {
  auto a = build_encoder<float>(student_cnn_config(), 7);
  auto b = build_encoder<float>(student_cnn_config(), 7);
  REQUIRE(a.params.size() == b.params.size());
  for (const auto& [name, v] : a.params) {
    auto& w = b.params.at(name);
    CHECK(std::memcmp(v->data.data(), w->data.data(), v->data.size() * sizeof(float)) == 0);
  }
  auto c = build_encoder<float>(student_cnn_config(), 8);
  CHECK(a.params.at("stem.conv.w")->data != c.params.at("stem.conv.w")->data);
}

TEST_CASE("encode is a pure function of parameters and input", "[encoders]") {
  auto enc = build_encoder<float>(student_cnn_config(), 2);
  auto img = random_images(2, 64, 11);
  Graph<float> g;
  g.set_grad_enabled(false);
  auto f1 = encode(g, enc, img);
  auto f2 = encode(g, enc, img);
  CHECK(std::memcmp(f1->data.data(), f2->data.data(), f1->data.size() * sizeof(float)) == 0);
}

TEST_CASE("all-zero images give finite deterministic features", "[encoders]") {
  auto enc = build_encoder<float>(teacher_vit_config(), 3);
  auto img = make_var<float>({1, 3, 64, 64});
  Graph<float> g;
  g.set_grad_enabled(false);
  auto f = encode(g, enc, img);
  CHECK(kern::all_finite(f->data.data(), f->data.size()));
}

TEST_CASE("permuting the batch permutes feature rows identically", "[encoders]") {
  auto enc = build_encoder<float>(student_cnn_config(), 4);
  auto img = random_images(3, 64, 13);
  auto perm_img = make_var<float>({3, 3, 64, 64});
  const int64_t stride = 3 * 64 * 64;
  const int perm[3] = {2, 0, 1};
  for (int i = 0; i < 3; ++i)
    std::copy_n(img->data.data() + perm[i] * stride, stride, perm_img->data.data() + i * stride);
  Graph<float> g;
  g.set_grad_enabled(false);
  auto f = encode(g, enc, img);
  auto fp = encode(g, enc, perm_img);
  const int64_t D = f->dim(1);
  for (int i = 0; i < 3; ++i)
    for (int64_t j = 0; j < D; ++j) CHECK(fp->data[i * D + j] == f->data[perm[i] * D + j]);
}

TEST_CASE("resolution mismatch is rejected", "[encoders]") {
  auto enc = build_encoder<float>(student_cnn_config(), 5);
  Graph<float> g;
  CHECK_THROWS_AS(encode(g, enc, random_images(1, 32, 17)), ShapeError);
}

TEST_CASE("invalid configs are rejected", "[encoders]") {
  EncoderConfig bad{.family = Family::Vit, .width = 64, .depth = 2, .patch_size = 7, .heads = 4,
                    .feature_dim = 64, .input_resolution = 64};
  CHECK_THROWS_AS(build_encoder<float>(bad, 1), ConfigError);
  EncoderConfig bad2 = student_cnn_config();
  bad2.width = 12;  // not divisible by 8 groups
  CHECK_THROWS_AS(build_encoder<float>(bad2, 1), ConfigError);
}

TEST_CASE("parameter counting matches closed forms", "[encoders]") {
  // linear layer E -> E with bias has E*E + E parameters; for E=64 that is 4160
  EncoderConfig cfg{.family = Family::Vit, .width = 64, .depth = 1, .patch_size = 8, .heads = 4,
                    .feature_dim = 64, .input_resolution = 64};
  auto enc = build_encoder<float>(cfg, 1);
  auto& w = enc.params.at("block0.attn_out.w");
  auto& b = enc.params.at("block0.attn_out.b");
  CHECK(w->size() + b->size() == 4160);

  // doubling both in/out channels of a square-kernel conv multiplies its count by 4
  auto tiny = build_encoder<float>(student_cnn_config(), 1);
  auto big = build_encoder<float>(student_cnn_big_config(), 1);
  CHECK(big.params.at("block0.conv1.w")->size() == 4 * tiny.params.at("block0.conv1.w")->size());
}

TEST_CASE("cnn student and vit half student are budget-matched", "[encoders]") {
  auto cnn = build_encoder<float>(student_cnn_config(), 1);
  auto vit = build_encoder<float>(student_vit_half_config(), 1);
  const double a = static_cast<double>(count_params(cnn));
  const double b = static_cast<double>(count_params(vit));
  INFO("cnn " << a << " vit-half " << b);
  CHECK(std::abs(a - b) / std::max(a, b) < 0.10);
}

TEST_CASE("gradient reaches every named parameter", "[encoders]") {
  for (auto cfg : {student_cnn_config(), student_vit_half_config()}) {
    auto enc = build_encoder<float>(cfg, 6);
    Graph<float> g;
    auto img = random_images(2, 64, 23);
    auto loss = mean_all(g, encode(g, enc, img));
    g.backward(loss);
    for (const auto& [name, v] : enc.params) {
      INFO(family_name(cfg.family) << " param " << name);
      REQUIRE(v->has_grad());
      double norm = 0;
      for (float x : v->grad) norm += std::abs(x);
      CHECK(norm > 0.0);
    }
  }
}

TEST_CASE("vit CLS output is invariant to matched patch and pos permutation", "[encoders]") {
  EncoderConfig cfg{.family = Family::Vit, .width = 64, .depth = 2, .patch_size = 8, .heads = 4,
                    .feature_dim = 64, .input_resolution = 32};
  auto enc = build_encoder<float>(cfg, 9);
  const int64_t grid = 4, P = 8, res = 32;
  auto img = random_images(1, res, 29);

  RngStream prng(31);
  std::vector<int64_t> perm(grid * grid);
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int64_t>(i);
  prng.shuffle(perm);
  auto img2 = make_var<float>(img->shape);
  for (int64_t t = 0; t < grid * grid; ++t) {
    const int64_t sr = (perm[t] / grid) * P, sc = (perm[t] % grid) * P;
    const int64_t dr = (t / grid) * P, dc = (t % grid) * P;
    for (int64_t ch = 0; ch < 3; ++ch)
      for (int64_t r = 0; r < P; ++r)
        for (int64_t c2 = 0; c2 < P; ++c2)
          img2->data[(ch * res + dr + r) * res + dc + c2] = img->data[(ch * res + sr + r) * res + sc + c2];
  }

  Graph<float> g;
  g.set_grad_enabled(false);
  auto f1 = encode(g, enc, img);

  // permute the positional embeddings the same way (row 0 is the CLS slot)
  auto enc2 = build_encoder<float>(cfg, 9);
  auto& pos = enc2.params.at("pos");
  auto old_pos = pos->data;
  for (int64_t t = 0; t < grid * grid; ++t)
    std::copy_n(old_pos.data() + (1 + perm[t]) * 64, 64, pos->data.data() + (1 + t) * 64);
  auto f2 = encode(g, enc2, img2);
  for (int64_t j = 0; j < 64; ++j) CHECK(f2->data[j] == Catch::Approx(f1->data[j]).margin(1e-5));
}

TEST_CASE("cnn pooled features are exactly reflection-symmetric in weight space", "[encoders]") {
  auto cfg = student_cnn_config(64);
  cfg.feature_dim = 64;
  auto enc = build_encoder<float>(cfg, 10);
  auto img = random_images(1, 64, 37);

  auto flipped = make_var<float>(img->shape);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t r = 0; r < 64; ++r)
      for (int64_t j = 0; j < 64; ++j)
        flipped->data[(c * 64 + r) * 64 + j] = img->data[(c * 64 + r) * 64 + (63 - j)];

  // flip every conv kernel along its width axis
  auto enc2 = build_encoder<float>(cfg, 10);
  for (auto& [name, v] : enc2.params) {
    if (v->rank() != 4) continue;
    const int64_t kw = v->dim(3), rows = v->size() / kw;
    for (int64_t r = 0; r < rows; ++r)
      std::reverse(v->data.begin() + r * kw, v->data.begin() + (r + 1) * kw);
  }

  Graph<float> g;
  g.set_grad_enabled(false);
  auto f1 = encode(g, enc, img);
  auto f2 = encode(g, enc2, flipped);
  for (int64_t j = 0; j < f1->size(); ++j) CHECK(f2->data[j] == Catch::Approx(f1->data[j]).margin(2e-5));
}
