#pragma once

// Procedural "general-purpose" image corpus: 1-3 anti-aliased shapes with
// jittered position/scale/color/orientation over a textured background.
// Every image is a pure function of (corpus seed, index), so the corpus is
// never stored; per-image labels (primary shape class, color index, centroid)
// drive the supervised teacher pre-training.

#include <sstream>
#include <string>
#include <vector>

#include "vistill/core/tensor.hpp"
#include "vistill/data/raster.hpp"
#include "vistill/io/sha256.hpp"

namespace vistill::data {

struct CorpusSpec {
  int64_t count = 5000;
  int64_t image_size = 64;
  std::vector<ShapeKind> vocab = {ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Ring};
  std::vector<Rgb> palette = {
      {0.85f, 0.20f, 0.20f},  // red
      {0.20f, 0.35f, 0.85f},  // blue
      {0.80f, 0.25f, 0.80f},  // magenta
      {0.20f, 0.75f, 0.80f},  // cyan
      {0.90f, 0.55f, 0.15f},  // orange
      {0.55f, 0.30f, 0.80f},  // purple
  };
  float primary_radius_min = 8.f;
  float primary_radius_max = 14.f;
  float distractor_radius_min = 3.f;
  float distractor_radius_max = 6.f;
  double heldout_fraction = 0.2;

  void validate() const {
    if (count < 2) throw ConfigError("corpus: count must be >= 2");
    if (vocab.empty()) throw ConfigError("corpus: empty shape vocabulary");
    if (palette.empty()) throw ConfigError("corpus: empty palette");
    if (heldout_fraction < 0.0 || heldout_fraction >= 1.0) throw ConfigError("corpus: bad heldout fraction");
  }

  std::string describe() const {
    std::ostringstream os;
    os << "count=" << count << ";size=" << image_size << ";vocab=";
    for (auto k : vocab) os << shape_name(k) << ",";
    os << ";palette=";
    for (const auto& c : palette) os << c.r << "/" << c.g << "/" << c.b << ",";
    os << ";pr=" << primary_radius_min << "-" << primary_radius_max << ";dr=" << distractor_radius_min << "-"
       << distractor_radius_max << ";held=" << heldout_fraction;
    return os.str();
  }
};

struct CorpusLabels {
  int shape_class = 0;  // index into vocab
  int color_index = 0;  // index into palette
  float cx = 0, cy = 0;  // primary centroid, normalized to [0,1]
};

class Corpus {
 public:
  Corpus(CorpusSpec spec, uint64_t seed) : spec_(std::move(spec)), seed_(seed) { spec_.validate(); }

  int64_t size() const { return spec_.count; }
  int64_t image_size() const { return spec_.image_size; }
  const CorpusSpec& spec() const { return spec_; }
  uint64_t seed() const { return seed_; }

  int64_t train_count() const {
    return spec_.count - heldout_count();
  }
  int64_t heldout_count() const {
    return static_cast<int64_t>(static_cast<double>(spec_.count) * spec_.heldout_fraction);
  }
  std::vector<int64_t> train_indices() const {
    std::vector<int64_t> v(static_cast<size_t>(train_count()));
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<int64_t>(i);
    return v;
  }
  std::vector<int64_t> heldout_indices() const {
    std::vector<int64_t> v(static_cast<size_t>(heldout_count()));
    for (size_t i = 0; i < v.size(); ++i) v[i] = train_count() + static_cast<int64_t>(i);
    return v;
  }

  Image image(int64_t index) const {
    CorpusLabels ignored;
    return render(index, ignored);
  }

  CorpusLabels labels(int64_t index) const {
    CorpusLabels lab;
    render(index, lab, /*pixels=*/false);
    return lab;
  }

  Image image_with_labels(int64_t index, CorpusLabels& lab) const { return render(index, lab); }

  /// Content fingerprint: spec, seed and a sample of rendered pixels.
  std::string fingerprint() const {
    io::Sha256 h;
    h.update(spec_.describe());
    h.update(&seed_, sizeof(seed_));
    auto probe = image(0);
    h.update(probe.chw.data(), std::min<size_t>(probe.chw.size(), 512) * sizeof(float));
    return h.hexdigest();
  }

 private:
  Image render(int64_t index, CorpusLabels& lab, bool pixels = true) const {
    if (index < 0 || index >= spec_.count)
      throw ContractError("corpus index " + std::to_string(index) + " out of range");
    // background and layout use independent streams so labels() never has to
    // replay the background draws
    RngStream bg(derive_seed(seed_, "corpus-bg", static_cast<uint64_t>(index)));
    RngStream rng(derive_seed(seed_, "corpus-layout", static_cast<uint64_t>(index)));
    const float S = static_cast<float>(spec_.image_size);
    Image img;
    if (pixels) {
      img = Image(spec_.image_size, spec_.image_size);
      Rgb base{static_cast<float>(bg.uniform(0.25, 0.65)), static_cast<float>(bg.uniform(0.25, 0.65)),
               static_cast<float>(bg.uniform(0.25, 0.65))};
      fill_textured_background(img, bg, base);
    }
    const int n_distractors = static_cast<int>(rng.randint(0, 3));  // 0..2, plus the primary = 1..3 shapes
    for (int d = 0; d < n_distractors; ++d) {
      const auto kind = spec_.vocab[static_cast<size_t>(rng.randint(0, static_cast<int64_t>(spec_.vocab.size())))];
      const auto color =
          spec_.palette[static_cast<size_t>(rng.randint(0, static_cast<int64_t>(spec_.palette.size())))];
      const float r = static_cast<float>(rng.uniform(spec_.distractor_radius_min, spec_.distractor_radius_max));
      const float cx = static_cast<float>(rng.uniform(r, S - r));
      const float cy = static_cast<float>(rng.uniform(r, S - r));
      const float ang = static_cast<float>(rng.uniform(0, 6.283185307));
      if (pixels) draw_shape(img, kind, cx, cy, r, ang, color);
    }
    const int shape_idx = static_cast<int>(rng.randint(0, static_cast<int64_t>(spec_.vocab.size())));
    const int color_idx = static_cast<int>(rng.randint(0, static_cast<int64_t>(spec_.palette.size())));
    const float r = static_cast<float>(rng.uniform(spec_.primary_radius_min, spec_.primary_radius_max));
    const float cx = static_cast<float>(rng.uniform(r, S - r));
    const float cy = static_cast<float>(rng.uniform(r, S - r));
    const float ang = static_cast<float>(rng.uniform(0, 6.283185307));
    if (pixels) draw_shape(img, spec_.vocab[static_cast<size_t>(shape_idx)], cx, cy, r, ang,
                           spec_.palette[static_cast<size_t>(color_idx)]);
    lab.shape_class = shape_idx;
    lab.color_index = color_idx;
    lab.cx = cx / S;
    lab.cy = cy / S;
    return img;
  }

  CorpusSpec spec_;
  uint64_t seed_ = 0;
};

}  // namespace vistill::data
