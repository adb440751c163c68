#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

#include "vistill/distill/distill.hpp"

using namespace vistill;
using vistill::distill::kd_loss;
using vistill::distill::pretrain_teacher;
using vistill::distill::freeze;
using vistill::distill::export_teacher_features;
using vistill::distill::load_teacher_features;
using vistill::distill::DistillConfig;
using vistill::distill::TeacherTrainConfig;

namespace {

nn::EncoderConfig tiny_teacher_cfg() {
  return {.family = nn::Family::Vit, .width = 32, .depth = 2, .patch_size = 8, .heads = 2,
          .feature_dim = 32, .input_resolution = 64, .param_budget_tag = "test-teacher"};
}

nn::EncoderConfig tiny_student_cfg() {
  return {.family = nn::Family::CnnResidual, .width = 8, .depth = 2, .feature_dim = 32,
          .input_resolution = 64, .groups = 4, .param_budget_tag = "test-student"};
}

data::CorpusSpec tiny_corpus_spec(int64_t n = 160) {
  data::CorpusSpec s;
  s.count = n;
  return s;
}

}  // namespace

TEST_CASE("kd_loss identity case is exactly zero", "[distill]") {
  Graph<float> g;
  auto z = make_var<float>({2, 3}, {0.5f, -1.f, 2.f, 0.f, 1.f, -2.f});
  CHECK(kd_loss(g, z, z)->data[0] == 0.f);
}

TEST_CASE("kd_loss matches the elementwise oracle", "[distill]") {
  Graph<float> g;
  auto zs = make_var<float>({1, 2}, {0.f, 0.f});
  auto zt = make_var<float>({1, 2}, {1.f, 2.f});
  CHECK(kd_loss(g, zs, zt)->data[0] == Catch::Approx(2.5).epsilon(1e-7));  // (1+4)/2

  auto bs = make_var<float>({2, 2}, {1.f, 0.f, 0.f, 1.f});
  auto bt = make_var<float>({2, 2}, {0.f, 0.f, 0.f, 0.f});
  CHECK(kd_loss(g, bs, bt)->data[0] == Catch::Approx(0.5).epsilon(1e-7));  // 2/4
}

TEST_CASE("kd_loss value is symmetric but gradient is one-sided", "[distill]") {
  Graph<float> g;
  auto a = make_var<float>({2, 2}, {1.f, 2.f, 3.f, 4.f}, true);
  auto b = make_var<float>({2, 2}, {0.f, 1.f, -1.f, 2.f}, true);
  auto lab = kd_loss(g, a, b);
  Graph<float> g2;
  auto lba = kd_loss(g2, b, a);
  CHECK(lab->data[0] == Catch::Approx(lba->data[0]));
  g.backward(lab);
  CHECK(a->has_grad());
  CHECK_FALSE(b->has_grad());  // stop-gradient side never receives gradient
}

TEST_CASE("kd_loss is invariant under identical batch permutation", "[distill]") {
  RngStream rng(5);
  auto zs = make_var<float>({4, 3});
  auto zt = make_var<float>({4, 3});
  for (auto& v : zs->data) v = (float)rng.normal();
  for (auto& v : zt->data) v = (float)rng.normal();
  Graph<float> g;
  const float base = kd_loss(g, zs, zt)->data[0];
  const int perm[4] = {2, 0, 3, 1};
  auto ps = make_var<float>({4, 3});
  auto pt = make_var<float>({4, 3});
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) {
      ps->data[i * 3 + j] = zs->data[perm[i] * 3 + j];
      pt->data[i * 3 + j] = zt->data[perm[i] * 3 + j];
    }
  CHECK(kd_loss(g, ps, pt)->data[0] == Catch::Approx(base));
}

TEST_CASE("kd_loss rejects mismatched shapes", "[distill]") {
  Graph<float> g;
  auto a = make_var<float>({2, 3});
  auto b = make_var<float>({2, 4});
  CHECK_THROWS_AS(kd_loss(g, a, b), ShapeError);
}

TEST_CASE("zero-epoch pre-training leaves the teacher at initialization", "[distill]") {
  data::Corpus corpus(tiny_corpus_spec(), 7);
  auto teacher = nn::build_encoder<float>(tiny_teacher_cfg(), 11);
  const auto before = io::params_sha256(teacher.params);
  auto stats = pretrain_teacher(teacher, corpus, {.epochs = 0}, 3);
  CHECK(io::params_sha256(teacher.params) == before);
  CHECK(stats.epoch_loss.empty());
}

TEST_CASE("teacher pre-training is deterministic and reduces loss", "[distill][slow]") {
  data::Corpus corpus(tiny_corpus_spec(192), 7);
  TeacherTrainConfig cfg{.epochs = 2, .batch = 32, .lr = 1e-3f};
  auto t1 = nn::build_encoder<float>(tiny_teacher_cfg(), 11);
  auto s1 = pretrain_teacher(t1, corpus, cfg, 3);
  auto t2 = nn::build_encoder<float>(tiny_teacher_cfg(), 11);
  auto s2 = pretrain_teacher(t2, corpus, cfg, 3);
  CHECK(io::params_sha256(t1.params) == io::params_sha256(t2.params));  // same seed, same bytes
  CHECK(s1.epoch_loss == s2.epoch_loss);
  CHECK(s1.epoch_loss.back() < s1.epoch_loss.front());
}

TEST_CASE("degenerate self-distillation starts at loss zero", "[distill]") {
  data::Corpus corpus(tiny_corpus_spec(64), 9);
  auto teacher = nn::build_encoder<float>(tiny_teacher_cfg(), 5);
  freeze(teacher);
  // student IS the frozen teacher's twin: identical weights, no projection
  auto student = nn::build_encoder<float>(tiny_teacher_cfg(), 5);
  std::vector<int64_t> idx = {0, 1, 2, 3};
  auto images = data::corpus_batch(corpus, idx, false, 0, 0);
  Graph<float> tg;
  NoGradGuard<float> ng(tg);
  auto z_t = nn::encode(tg, teacher, images);
  Graph<float> g;
  student.set_trainable(true);
  auto z_s = nn::encode(g, student, images);
  CHECK(kd_loss(g, z_s, z_t)->data[0] == 0.f);
}

TEST_CASE("distillation keeps the teacher bit-frozen and reduces loss", "[distill][slow]") {
  data::Corpus corpus(tiny_corpus_spec(160), 13);
  auto teacher = nn::build_encoder<float>(tiny_teacher_cfg(), 21);
  freeze(teacher);
  auto student = nn::build_encoder<float>(tiny_student_cfg(), 22);
  DistillConfig cfg{.epochs = 3, .batch = 32, .lr = 2e-3f, .augment = true, .seed = 100};
  auto stats = vistill::distill::distill(teacher, student, corpus, cfg);
  CHECK(stats.teacher_sha_before == stats.teacher_sha_after);
  CHECK(stats.final_train_loss < stats.initial_train_loss);
  CHECK(stats.heldout_loss.back() > 0.0);
  for (const auto& [name, v] : teacher.params) CHECK_FALSE(v->has_grad());  // never allocated
}

TEST_CASE("distill requires a frozen teacher and matching dims", "[distill]") {
  data::Corpus corpus(tiny_corpus_spec(64), 1);
  auto teacher = nn::build_encoder<float>(tiny_teacher_cfg(), 2);
  auto student = nn::build_encoder<float>(tiny_student_cfg(), 3);
  DistillConfig cfg{.epochs = 1, .batch = 32};
  CHECK_THROWS_AS(vistill::distill::distill(teacher, student, corpus, cfg), ContractError);  // trainable teacher
  freeze(teacher);
  auto bad_student = nn::build_encoder<float>(tiny_student_cfg(), 3);
  bad_student.config.feature_dim = 16;
  CHECK_THROWS_AS(vistill::distill::distill(teacher, bad_student, corpus, cfg), ConfigError);
}

TEST_CASE("teacher feature file round-trips bit-identically", "[distill]") {
  data::Corpus corpus(tiny_corpus_spec(48), 17);
  auto teacher = nn::build_encoder<float>(tiny_teacher_cfg(), 8);
  freeze(teacher);
  const std::string path = "/tmp/vistill_feats.bin";
  export_teacher_features(teacher, corpus, path, 16);
  auto tf = load_teacher_features(path, corpus);
  CHECK(tf.count == 48);
  CHECK(tf.dim == 32);
  // recompute one batch live and compare bitwise
  std::vector<int64_t> idx = {5, 6, 7};
  auto images = data::corpus_batch(corpus, idx, false, 0, 0);
  Graph<float> g;
  NoGradGuard<float> ng(g);
  auto z = nn::encode(g, teacher, images);
  for (int64_t b = 0; b < 3; ++b)
    for (int64_t j = 0; j < 32; ++j) CHECK(z->data[b * 32 + j] == tf.row(idx[b])[j]);
  std::remove(path.c_str());
}

TEST_CASE("feature file refuses wrong corpus and truncation", "[distill]") {
  data::Corpus corpus(tiny_corpus_spec(48), 17);
  data::Corpus other(tiny_corpus_spec(48), 18);
  auto teacher = nn::build_encoder<float>(tiny_teacher_cfg(), 8);
  freeze(teacher);
  const std::string path = "/tmp/vistill_feats2.bin";
  export_teacher_features(teacher, corpus, path, 16);
  CHECK_THROWS_AS(load_teacher_features(path, other), ConfigError);
  // truncate
  {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_teacher_features(path, corpus), IoError);
  std::remove(path.c_str());
}

TEST_CASE("distilling from file matches the live teacher step for step", "[distill][slow]") {
  data::Corpus corpus(tiny_corpus_spec(96), 23);
  auto teacher = nn::build_encoder<float>(tiny_teacher_cfg(), 31);
  freeze(teacher);
  const std::string path = "/tmp/vistill_feats3.bin";
  export_teacher_features(teacher, corpus, path, 32);
  auto tf = load_teacher_features(path, corpus);

  DistillConfig cfg{.epochs = 2, .batch = 32, .lr = 1e-3f, .augment = false, .seed = 55};
  auto live_student = nn::build_encoder<float>(tiny_student_cfg(), 77);
  auto live_stats = vistill::distill::distill(teacher, live_student, corpus, cfg);
  auto file_student = nn::build_encoder<float>(tiny_student_cfg(), 77);
  auto file_stats = vistill::distill::distill_from_file(tf, file_student, corpus, cfg);

  REQUIRE(live_stats.batch_loss.size() == file_stats.batch_loss.size());
  for (size_t i = 0; i < live_stats.batch_loss.size(); ++i)
    CHECK(std::abs(live_stats.batch_loss[i] - file_stats.batch_loss[i]) < 1e-6);
  CHECK_THROWS_AS(vistill::distill::distill_from_file(tf, file_student, corpus,
                                    DistillConfig{.epochs = 1, .batch = 32, .augment = true, .seed = 1}),
                  ConfigError);
  std::remove(path.c_str());
}
