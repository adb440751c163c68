#pragma once

// Batch assembly: images and corpus samples into [B,3,H,W] tensors, with the
// optional distillation-time augmentation (random crop-with-resize in scale
// [0.8,1] and horizontal flip). The augmentation for a given (seed, epoch,
// image index) is fixed, so teacher and student always see the same view and
// runs replay exactly.

#include <vector>

#include "vistill/core/tensor.hpp"
#include "vistill/data/corpus.hpp"

namespace vistill::data {

inline Var<float> images_to_var(const std::vector<Image>& imgs) {
  if (imgs.empty()) throw ContractError("images_to_var: empty batch");
  const int64_t B = static_cast<int64_t>(imgs.size()), H = imgs[0].h, W = imgs[0].w;
  auto out = make_var<float>({B, 3, H, W});
  for (int64_t b = 0; b < B; ++b) {
    if (imgs[b].h != H || imgs[b].w != W) throw ShapeError("images_to_var: ragged batch");
    std::copy(imgs[b].chw.begin(), imgs[b].chw.end(), out->data.begin() + b * 3 * H * W);
  }
  return out;
}

inline Image augment_image(const Image& img, RngStream& rng) {
  const float s = static_cast<float>(rng.uniform(0.8, 1.0));
  const float span_h = s * static_cast<float>(img.h), span_w = s * static_cast<float>(img.w);
  const float y0 = static_cast<float>(rng.uniform(0.0, img.h - span_h));
  const float x0 = static_cast<float>(rng.uniform(0.0, img.w - span_w));
  const bool flip = rng.uniform() < 0.5;
  Image out = crop_resize(img, y0, x0, y0 + span_h, x0 + span_w, img.h, img.w);
  if (flip) hflip_inplace(out);
  return out;
}

/// Corpus mini-batch; augmentation keyed by (seed, epoch, image index).
inline Var<float> corpus_batch(const Corpus& corpus, const std::vector<int64_t>& indices, bool augment,
                               uint64_t seed, int64_t epoch, std::vector<CorpusLabels>* labels_out = nullptr) {
  std::vector<Image> imgs(indices.size());
  if (labels_out) labels_out->resize(indices.size());
#pragma omp parallel for schedule(static) if (indices.size() > 4)
  for (size_t i = 0; i < indices.size(); ++i) {
    CorpusLabels lab;
    Image img = corpus.image_with_labels(indices[i], lab);
    if (augment) {
      RngStream rng(derive_seed(seed, "aug", static_cast<uint64_t>(epoch) * static_cast<uint64_t>(corpus.size()) +
                                                 static_cast<uint64_t>(indices[i])));
      img = augment_image(img, rng);
    }
    if (labels_out) (*labels_out)[i] = lab;
    imgs[i] = std::move(img);
  }
  return images_to_var(imgs);
}

}  // namespace vistill::data
