#pragma once

// Feature distillation: teacher pre-training on corpus labels, the MSE
// feature-matching loss with an enforced stop-gradient on the teacher side,
// the distillation loop producing the student checkpoint, and a feature file
// path so externally computed teacher embeddings can be plugged in.

#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vistill/core/optim.hpp"
#include "vistill/data/batch.hpp"
#include "vistill/io/checkpoint.hpp"
#include "vistill/nn/encoder.hpp"

namespace vistill::distill {

using nn::Encoder;

/// Eq-style feature-matching loss: mean squared error over batch and feature
/// dimensions. The teacher side is detached unconditionally, so gradient can
/// only flow into z_S regardless of what the caller passes.
template <class T>
Var<T> kd_loss(Graph<T>& g, const Var<T>& z_s, const Var<T>& z_t) {
  if (z_s->shape != z_t->shape)
    throw ShapeError("kd_loss: feature shapes differ, " + dims_str(z_s->shape) + " vs " + dims_str(z_t->shape));
  auto target = detach(z_t);  // stop-gradient
  auto d = sub(g, z_s, target);
  return mean_all(g, mul(g, d, d));
}

// ---------------------------------------------------------------------------
// Teacher pre-training (supervised proxy tasks on corpus labels)
// ---------------------------------------------------------------------------

struct TeacherTrainConfig {
  int64_t epochs = 10;
  int64_t batch = 64;
  float lr = 1e-3f;
  bool augment = true;
  float centroid_weight = 1.0f;
};

struct TeacherTrainStats {
  std::vector<double> epoch_loss;
  double heldout_shape_accuracy = 0.0;
  double heldout_color_accuracy = 0.0;
};

/// Trains the ViT backbone with a multi-task linear head (shape class, color
/// class, centroid regression); the head is discarded. 0 epochs leaves the
/// randomly initialized backbone untouched (frozen-random control).
inline TeacherTrainStats pretrain_teacher(Encoder<float>& teacher, const data::Corpus& corpus,
                                          const TeacherTrainConfig& cfg, uint64_t seed,
                                          const std::function<void(int64_t, double)>& on_epoch = {}) {
  const int64_t n_shapes = static_cast<int64_t>(corpus.spec().vocab.size());
  const int64_t n_colors = static_cast<int64_t>(corpus.spec().palette.size());
  const int64_t E = teacher.config.native_dim();
  const int64_t out_dim = n_shapes + n_colors + 2;

  // task head, discarded after training
  std::map<std::string, Var<float>> head;
  nn::detail::init_param<float>(head, derive_seed(seed, "teacher-head"), "head.w", {E, out_dim}, "weight");
  nn::detail::init_param<float>(head, derive_seed(seed, "teacher-head"), "head.b", {out_dim}, "zero");

  teacher.set_trainable(true);
  std::vector<Var<float>> params = teacher.parameters();
  params.push_back(head.at("head.w"));
  params.push_back(head.at("head.b"));
  Adam<float> opt(params, {.lr = cfg.lr});

  auto forward_loss = [&](Graph<float>& g, const Var<float>& images, const std::vector<data::CorpusLabels>& labs) {
    const int64_t B = images->dim(0);
    auto feats = nn::encode(g, teacher, images);
    auto logits = add(g, matmul(g, feats, head.at("head.w")), head.at("head.b"));
    auto shape_oh = make_var<float>({B, n_shapes});
    auto color_oh = make_var<float>({B, n_colors});
    auto cent = make_var<float>({B, 2});
    for (int64_t b = 0; b < B; ++b) {
      shape_oh->data[b * n_shapes + labs[b].shape_class] = 1.f;
      color_oh->data[b * n_colors + labs[b].color_index] = 1.f;
      cent->data[b * 2] = labs[b].cx;
      cent->data[b * 2 + 1] = labs[b].cy;
    }
    auto ls = mse(g, softmax(g, slice(g, logits, 1, 0, n_shapes)), shape_oh);
    auto lc = mse(g, softmax(g, slice(g, logits, 1, n_shapes, n_shapes + n_colors)), color_oh);
    auto lr_ = mse(g, slice(g, logits, 1, n_shapes + n_colors, out_dim), cent);
    return add(g, add(g, ls, lc), scale(g, lr_, cfg.centroid_weight));
  };

  TeacherTrainStats stats;
  auto train_idx = corpus.train_indices();
  RngStream shuffle_rng(derive_seed(seed, "teacher-shuffle"));
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(train_idx);
    double loss_sum = 0;
    int64_t batches = 0;
    for (size_t off = 0; off + cfg.batch <= train_idx.size(); off += cfg.batch) {
      std::vector<int64_t> idx(train_idx.begin() + off, train_idx.begin() + off + cfg.batch);
      std::vector<data::CorpusLabels> labs;
      auto images = data::corpus_batch(corpus, idx, cfg.augment, seed, epoch, &labs);
      Graph<float> g;
      Var<float> loss;
      try {
        loss = forward_loss(g, images, labs);
        g.backward(loss);
        opt.step();
      } catch (const NumericError& e) {
        throw TrainingError("teacher pre-training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      loss_sum += loss->data[0];
      ++batches;
    }
    stats.epoch_loss.push_back(batches ? loss_sum / batches : 0.0);
    if (on_epoch) on_epoch(epoch, stats.epoch_loss.back());
  }

  // heldout accuracy of the task head (reported, then the head is dropped)
  auto held = corpus.heldout_indices();
  int64_t shape_hits = 0, color_hits = 0, seen = 0;
  for (size_t off = 0; off < held.size(); off += cfg.batch) {
    const size_t end = std::min(held.size(), off + static_cast<size_t>(cfg.batch));
    std::vector<int64_t> idx(held.begin() + off, held.begin() + end);
    std::vector<data::CorpusLabels> labs;
    auto images = data::corpus_batch(corpus, idx, false, seed, 0, &labs);
    Graph<float> g;
    NoGradGuard<float> ng(g);
    auto feats = nn::encode(g, teacher, images);
    auto logits = add(g, matmul(g, feats, head.at("head.w")), head.at("head.b"));
    for (size_t b = 0; b < idx.size(); ++b) {
      const float* row = logits->data.data() + static_cast<int64_t>(b) * out_dim;
      const int64_t sp = static_cast<int64_t>(std::max_element(row, row + n_shapes) - row);
      const int64_t cp = static_cast<int64_t>(std::max_element(row + n_shapes, row + n_shapes + n_colors) -
                                              (row + n_shapes));
      shape_hits += (sp == labs[b].shape_class);
      color_hits += (cp == labs[b].color_index);
      ++seen;
    }
  }
  stats.heldout_shape_accuracy = seen ? static_cast<double>(shape_hits) / seen : 0.0;
  stats.heldout_color_accuracy = seen ? static_cast<double>(color_hits) / seen : 0.0;
  return stats;
}

// ---------------------------------------------------------------------------
// Teacher feature file (externally computed embeddings path)
// ---------------------------------------------------------------------------

struct TeacherFeatures {
  int64_t count = 0;
  int64_t dim = 0;
  std::string corpus_fingerprint;
  std::vector<float> data;  // count x dim

  const float* row(int64_t i) const { return data.data() + i * dim; }
};

inline void export_teacher_features(const Encoder<float>& teacher, const data::Corpus& corpus,
                                    const std::string& path, int64_t batch = 64) {
  TeacherFeatures tf;
  tf.count = corpus.size();
  tf.dim = teacher.config.feature_dim;
  tf.corpus_fingerprint = corpus.fingerprint();
  tf.data.resize(static_cast<size_t>(tf.count * tf.dim));
  for (int64_t off = 0; off < tf.count; off += batch) {
    const int64_t end = std::min(tf.count, off + batch);
    std::vector<int64_t> idx(static_cast<size_t>(end - off));
    for (int64_t i = off; i < end; ++i) idx[static_cast<size_t>(i - off)] = i;
    auto images = data::corpus_batch(corpus, idx, false, 0, 0);
    Graph<float> g;
    NoGradGuard<float> ng(g);
    auto feats = nn::encode(g, teacher, images);
    std::copy(feats->data.begin(), feats->data.end(), tf.data.begin() + off * tf.dim);
  }
  io::json manifest{{"format_version", 1},
                    {"count", tf.count},
                    {"dim", tf.dim},
                    {"corpus_fingerprint", tf.corpus_fingerprint},
                    {"payload_sha256", io::sha256_hex(tf.data.data(), tf.data.size() * sizeof(float))}};
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("teacher features: cannot open " + path);
  f << manifest.dump() << "\n";
  f.write(reinterpret_cast<const char*>(tf.data.data()),
          static_cast<std::streamsize>(tf.data.size() * sizeof(float)));
}

inline TeacherFeatures load_teacher_features(const std::string& path, const data::Corpus& corpus) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("teacher features: cannot open " + path);
  std::string header_line;
  if (!std::getline(f, header_line)) throw IoError("teacher features: missing manifest in " + path);
  io::json manifest;
  try {
    manifest = io::json::parse(header_line);
  } catch (const io::json::exception& e) {
    throw IoError("teacher features: corrupt manifest: " + std::string(e.what()));
  }
  TeacherFeatures tf;
  tf.count = manifest.at("count").get<int64_t>();
  tf.dim = manifest.at("dim").get<int64_t>();
  tf.corpus_fingerprint = manifest.at("corpus_fingerprint").get<std::string>();
  if (tf.corpus_fingerprint != corpus.fingerprint())
    throw ConfigError("teacher features: corpus fingerprint mismatch; refusing to distill from " + path);
  if (tf.count != corpus.size()) throw ConfigError("teacher features: record count differs from corpus");
  tf.data.resize(static_cast<size_t>(tf.count * tf.dim));
  f.read(reinterpret_cast<char*>(tf.data.data()), static_cast<std::streamsize>(tf.data.size() * sizeof(float)));
  if (static_cast<size_t>(f.gcount()) != tf.data.size() * sizeof(float))
    throw IoError("teacher features: truncated payload in " + path);
  if (io::sha256_hex(tf.data.data(), tf.data.size() * sizeof(float)) !=
      manifest.at("payload_sha256").get<std::string>())
    throw IoError("teacher features: payload checksum mismatch in " + path);
  return tf;
}

// ---------------------------------------------------------------------------
// Distillation loop
// ---------------------------------------------------------------------------

struct DistillConfig {
  int64_t epochs = 20;
  int64_t batch = 64;
  float lr = 1e-3f;
  bool augment = true;
  uint64_t seed = 0;

  void validate() const {
    if (epochs < 1 || batch < 1 || lr <= 0) throw ConfigError("distill config: epochs>=1, batch>=1, lr>0 required");
  }
};

struct DistillStats {
  std::vector<double> train_loss;    // per epoch
  std::vector<double> heldout_loss;  // per epoch
  std::vector<double> batch_loss;    // every step, for equivalence checks
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;
  std::string teacher_sha_before, teacher_sha_after;
};

namespace detail {

// One training source: either a live frozen teacher or a feature file.
struct TeacherSource {
  const Encoder<float>* live = nullptr;
  const TeacherFeatures* file = nullptr;

  Var<float> features(const std::vector<int64_t>& indices, const Var<float>& images) const {
    if (live) {
      Graph<float> tg;
      NoGradGuard<float> ng(tg);
      return nn::encode(tg, *live, images);
    }
    const int64_t B = static_cast<int64_t>(indices.size());
    auto out = make_var<float>({B, file->dim});
    for (int64_t b = 0; b < B; ++b)
      std::copy_n(file->row(indices[static_cast<size_t>(b)]), file->dim, out->data.begin() + b * file->dim);
    return out;
  }
  int64_t dim() const { return live ? live->config.feature_dim : file->dim; }
};

inline DistillStats distill_impl(const TeacherSource& source, Encoder<float>& student, const data::Corpus& corpus,
                                 const DistillConfig& cfg,
                                 const std::function<void(int64_t, double, double)>& on_epoch) {
  cfg.validate();
  if (student.config.feature_dim != source.dim())
    throw ConfigError("distill: student feature_dim " + std::to_string(student.config.feature_dim) +
                      " does not match teacher dim " + std::to_string(source.dim()));
  if (source.file && cfg.augment)
    throw ConfigError("distill: augmentation requires a live teacher; disable it to distill from a feature file");

  DistillStats stats;
  if (source.live) stats.teacher_sha_before = io::params_sha256(source.live->params);

  student.set_trainable(true);
  Adam<float> opt(student.parameters(), {.lr = cfg.lr});
  auto train_idx = corpus.train_indices();
  RngStream shuffle_rng(derive_seed(cfg.seed, "distill-shuffle"));

  auto eval_heldout = [&]() {
    auto held = corpus.heldout_indices();
    double sum = 0;
    int64_t n = 0;
    for (size_t off = 0; off < held.size(); off += cfg.batch) {
      const size_t end = std::min(held.size(), off + cfg.batch);
      std::vector<int64_t> idx(held.begin() + off, held.begin() + end);
      auto images = data::corpus_batch(corpus, idx, false, cfg.seed, 0);
      auto z_t = source.features(idx, images);
      Graph<float> g;
      NoGradGuard<float> ng(g);
      auto z_s = nn::encode(g, student, images);
      sum += kd_loss(g, z_s, z_t)->data[0];
      ++n;
    }
    return n ? sum / n : 0.0;
  };

  int consecutive_blowups = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(train_idx);
    double loss_sum = 0;
    int64_t batches = 0;
    for (size_t off = 0; off + cfg.batch <= train_idx.size(); off += cfg.batch) {
      std::vector<int64_t> idx(train_idx.begin() + off, train_idx.begin() + off + cfg.batch);
      auto images = data::corpus_batch(corpus, idx, cfg.augment, cfg.seed, epoch);
      auto z_t = source.features(idx, images);
      Graph<float> g;
      Var<float> loss;
      try {
        auto z_s = nn::encode(g, student, images);
        loss = kd_loss(g, z_s, z_t);
        g.backward(loss);
        opt.step();
      } catch (const NumericError& e) {
        throw TrainingError("distillation diverged (NaN) at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      stats.batch_loss.push_back(loss->data[0]);
      loss_sum += loss->data[0];
      ++batches;
    }
    const double epoch_loss = batches ? loss_sum / batches : 0.0;
    stats.train_loss.push_back(epoch_loss);
    stats.heldout_loss.push_back(eval_heldout());
    if (epoch == 0) stats.initial_train_loss = epoch_loss;
    // divergence guard: sustained blowup relative to the first epoch
    if (epoch_loss > 10.0 * stats.initial_train_loss && stats.initial_train_loss > 0) {
      if (++consecutive_blowups >= 3)
        throw TrainingError("distillation diverged: loss above 10x initial for 3 consecutive epochs");
    } else {
      consecutive_blowups = 0;
    }
    if (on_epoch) on_epoch(epoch, epoch_loss, stats.heldout_loss.back());
  }
  stats.final_train_loss = stats.train_loss.empty() ? 0.0 : stats.train_loss.back();
  if (source.live) {
    stats.teacher_sha_after = io::params_sha256(source.live->params);
    if (stats.teacher_sha_before != stats.teacher_sha_after)
      throw ContractError("distill: teacher parameters changed during distillation");
  }
  return stats;
}

}  // namespace detail

/// Algorithm step 1: train the student to match frozen teacher features.
inline DistillStats distill(const Encoder<float>& teacher, Encoder<float>& student, const data::Corpus& corpus,
                            const DistillConfig& cfg,
                            const std::function<void(int64_t, double, double)>& on_epoch = {}) {
  // frozen teacher: gradients must never be allocated on its parameters
  for (const auto& [name, v] : teacher.params)
    if (v->requires_grad || v->has_grad())
      throw ContractError("distill: teacher must be frozen (parameter '" + name + "' is trainable)");
  detail::TeacherSource src;
  src.live = &teacher;
  return detail::distill_impl(src, student, corpus, cfg, on_epoch);
}

/// Same loop, teacher features read from an exported file.
inline DistillStats distill_from_file(const TeacherFeatures& features, Encoder<float>& student,
                                      const data::Corpus& corpus, const DistillConfig& cfg,
                                      const std::function<void(int64_t, double, double)>& on_epoch = {}) {
  detail::TeacherSource src;
  src.file = &features;
  return detail::distill_impl(src, student, corpus, cfg, on_epoch);
}

/// Marks every parameter frozen (requires_grad=false). Used on teachers.
inline void freeze(Encoder<float>& enc) { enc.set_trainable(false); }

}  // namespace vistill::distill
