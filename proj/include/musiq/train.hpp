#pragma once

#include <optional>
#include <string>
#include <vector>

#include "musiq/model.hpp"
#include "musiq/optim.hpp"

namespace musiq {

// One manifest row: an image path plus either a scalar MOS or a bucket
// histogram (normalized on load).
struct ManifestEntry {
  std::string path;
  double mos = 0.0;
  std::vector<double> distribution;  // empty for scalar manifests
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  bool has_distribution = false;
  int buckets = 0;

  // Scalar view of a label (the distribution mean for histogram labels).
  double label_score(size_t i) const;
};

// CSV with header `path,mos` or `path,d1,...,dB`; relative paths resolve
// against the manifest's directory.
Manifest load_manifest(const std::string& path);

struct TrainOptions {
  int epochs = 10;
  int batch_size = 1;
  OptimizerConfig optimizer;
  double emd_r = 2.0;
  bool hflip = true;
  uint64_t seed = 0;
  std::string log_path;  // empty -> stdout
};

struct TrainReport {
  int steps = 0;
  int skipped_images = 0;
  double final_epoch_loss = 0.0;
};

struct EvalResult {
  double srcc = 0.0;
  double plcc = 0.0;
  double mse = 0.0;
  std::optional<double> cls_acc;  // distribution labels only
  bool degenerate = false;        // constant predictions or labels
  int skipped_images = 0;
};

// Fine-tuning loop: per image, optional horizontal flip, full multi-scale
// tokenization with the padded layout, forward, loss, backward; gradients
// are averaged over the batch before each cosine-scheduled optimizer step.
TrainReport train(Model<float>& model, const Manifest& manifest, const TrainOptions& opts);

// One image at a time with the tight (unpadded) layout.
EvalResult evaluate(const Model<float>& model, const Manifest& manifest);

}  // namespace musiq
