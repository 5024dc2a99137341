#include "musiq/train.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "musiq/codec.hpp"
#include "musiq/metrics.hpp"

namespace musiq {

namespace fs = std::filesystem;

double Manifest::label_score(size_t i) const {
  const ManifestEntry& e = entries.at(i);
  if (e.distribution.empty()) return e.mos;
  return distribution_mean_score(e.distribution);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  size_t b = s.find_last_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  return s.substr(a, b - a + 1);
}

}  // namespace

Manifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DecodeError("cannot open manifest: " + path);
  fs::path base = fs::path(path).parent_path();

  std::string line;
  if (!std::getline(f, line)) throw DecodeError("manifest is empty: " + path);
  std::vector<std::string> header = split_csv_line(trim(line));
  if (header.size() < 2 || trim(header[0]) != "path")
    throw DecodeError("manifest header must be `path,mos` or `path,d1,...,dB`");

  Manifest m;
  if (header.size() == 2 && trim(header[1]) == "mos") {
    m.has_distribution = false;
  } else {
    m.has_distribution = true;
    m.buckets = static_cast<int>(header.size()) - 1;
    for (size_t i = 1; i < header.size(); ++i)
      if (trim(header[i]) != "d" + std::to_string(i))
        throw DecodeError("manifest header must be `path,mos` or `path,d1,...,dB`");
  }

  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty()) continue;
    std::vector<std::string> fields = split_csv_line(t);
    if (fields.size() != header.size())
      throw DecodeError("manifest line " + std::to_string(lineno) + ": expected " +
                        std::to_string(header.size()) + " fields");
    ManifestEntry e;
    fs::path p = fs::path(trim(fields[0]));
    e.path = p.is_absolute() ? p.string() : (base / p).string();
    try {
      if (m.has_distribution) {
        double sum = 0.0;
        for (int i = 0; i < m.buckets; ++i) {
          double v = std::stod(trim(fields[i + 1]));
          if (v < 0.0)
            throw DecodeError("manifest line " + std::to_string(lineno) +
                              ": negative histogram count");
          e.distribution.push_back(v);
          sum += v;
        }
        if (sum <= 0.0)
          throw DecodeError("manifest line " + std::to_string(lineno) +
                            ": histogram has no mass");
        for (double& v : e.distribution) v /= sum;
      } else {
        e.mos = std::stod(trim(fields[1]));
      }
    } catch (const DecodeError&) {
      throw;
    } catch (...) {
      throw DecodeError("manifest line " + std::to_string(lineno) + ": malformed number");
    }
    m.entries.push_back(std::move(e));
  }
  if (m.entries.empty()) throw DecodeError("manifest has no entries: " + path);
  return m;
}

namespace {

struct LoadedImage {
  bool ok = false;
  ImageBuffer image;
};

std::vector<LoadedImage> decode_all(const Manifest& manifest, int* skipped) {
  std::vector<LoadedImage> out(manifest.entries.size());
  for (size_t i = 0; i < manifest.entries.size(); ++i) {
    try {
      out[i].image = load_image(manifest.entries[i].path);
      out[i].ok = true;
    } catch (const DecodeError& e) {
      std::cerr << "warning: skipping " << manifest.entries[i].path << ": " << e.what()
                << "\n";
      ++*skipped;
    }
  }
  return out;
}

void check_labels(const Model<float>& model, const Manifest& manifest) {
  bool wants_dist = model.config().head == HeadKind::Distribution;
  if (wants_dist != manifest.has_distribution)
    throw ConfigError(wants_dist ? "distribution head requires histogram labels"
                                 : "scalar head requires mos labels");
  if (wants_dist && manifest.buckets != model.config().buckets)
    throw ConfigError("manifest has " + std::to_string(manifest.buckets) +
                      " buckets, model expects " + std::to_string(model.config().buckets));
}

}  // namespace

TrainReport train(Model<float>& model, const Manifest& manifest, const TrainOptions& opts) {
  if (opts.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (opts.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  check_labels(model, manifest);

  TrainReport report;
  std::vector<LoadedImage> images = decode_all(manifest, &report.skipped_images);
  std::vector<size_t> usable;
  for (size_t i = 0; i < images.size(); ++i)
    if (images[i].ok) usable.push_back(i);
  if (usable.empty() && opts.epochs > 0)
    throw Error("no decodable images in the manifest");

  std::ostream* log = &std::cout;
  std::ofstream log_file;
  if (!opts.log_path.empty()) {
    log_file.open(opts.log_path);
    if (!log_file) throw IoError("cannot open log file: " + opts.log_path);
    log = &log_file;
  }
  *log << "epoch,step,lr,loss\n";

  int64_t steps_per_epoch =
      (static_cast<int64_t>(usable.size()) + opts.batch_size - 1) / opts.batch_size;
  int64_t total_steps = steps_per_epoch * opts.epochs;
  Optimizer<float> optimizer(opts.optimizer, total_steps);
  Rng rng(opts.seed + 1);  // model init consumed the base seed

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::vector<size_t> order = usable;
    rng.shuffle(order);
    double epoch_loss = 0.0;
    int époch_count = 0;
    for (size_t start = 0; start < order.size(); start += opts.batch_size) {
      size_t end = std::min(order.size(), start + opts.batch_size);
      Gradients<float> batch_grads;
      double batch_loss = 0.0;
      for (size_t bi = start; bi < end; ++bi) {
        size_t idx = order[bi];
        ImageBuffer img = images[idx].image;
        if (opts.hflip && rng.bernoulli(0.5)) img = hflip(img);
        MultiScaleRepresentation ms = build_multiscale(img, model.config().scales);
        TokenizedImage tokens = model.tokenize_input(ms, /*padded=*/true);
        Graph<float> g(true);
        ParamBinder<float> bind(g, model.params());
        ForwardResult<float> fwd = model.forward_bound(g, bind, tokens);
        Var<float> loss =
            manifest.has_distribution
                ? model.loss(g, fwd, manifest.entries[idx].distribution, opts.emd_r)
                : model.loss(g, fwd, manifest.entries[idx].mos);
        batch_loss += static_cast<double>(loss.val().item());
        g.backward(loss.id);
        Gradients<float> grads = bind.collect();
        gradients_accumulate(batch_grads, grads);
      }
      int count = static_cast<int>(end - start);
      gradients_scale(batch_grads, 1.0f / static_cast<float>(count));
      double lr = optimizer.current_lr();
      optimizer.step(model.params(), batch_grads);
      ++report.steps;
      epoch_loss += batch_loss;
      époch_count += count;
      if (start + opts.batch_size >= order.size())
        *log << epoch << "," << report.steps << "," << lr << ","
             << batch_loss / count << "\n";
    }
    if (époch_count > 0) report.final_epoch_loss = epoch_loss / époch_count;
  }
  return report;
}

EvalResult evaluate(const Model<float>& model, const Manifest& manifest) {
  check_labels(model, manifest);
  EvalResult result;
  std::vector<double> preds, labels;
  std::vector<int> pred_pos, label_pos;
  int correct = 0, classified = 0;
  for (size_t i = 0; i < manifest.entries.size(); ++i) {
    ImageBuffer img;
    try {
      img = load_image(manifest.entries[i].path);
    } catch (const DecodeError& e) {
      std::cerr << "warning: skipping " << manifest.entries[i].path << ": " << e.what()
                << "\n";
      ++result.skipped_images;
      continue;
    }
    MultiScaleRepresentation ms = build_multiscale(img, model.config().scales);
    double pred = model.score(ms, /*padded=*/false);
    double label = manifest.label_score(i);
    preds.push_back(pred);
    labels.push_back(label);
    if (manifest.has_distribution) {
      ++classified;
      if ((pred >= 5.0) == (label >= 5.0)) ++correct;
    }
  }
  if (preds.size() < 2) throw Error("evaluation needs at least 2 decodable images");
  bool deg1 = false, deg2 = false;
  result.srcc = spearman(preds, labels, &deg1);
  result.plcc = pearson(preds, labels, &deg2);
  result.degenerate = deg1 || deg2;
  result.mse = mean_squared_error(preds, labels);
  if (manifest.has_distribution && classified > 0)
    result.cls_acc = static_cast<double>(correct) / classified;
  return result;
}

}  // namespace musiq
