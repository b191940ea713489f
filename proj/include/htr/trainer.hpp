#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "htr/checkpoint.hpp"
#include "htr/ctc.hpp"
#include "htr/dataset.hpp"
#include "htr/metrics.hpp"
#include "htr/model.hpp"
#include "htr/preprocess.hpp"
#include "htr/threading.hpp"
#include "htr/util.hpp"
#include "htr/wbs.hpp"

namespace htr {

struct TrainConfig {
  std::size_t epochs = 1000;
  std::size_t batch = 16;
  double lr = 0.001;
  std::size_t stop_tolerance = 20;    // epochs without improvement before halting
  std::size_t reduce_tolerance = 15;  // epochs without improvement before lr cut
  double reduce_factor = 0.2;
  std::uint64_t seed = 0;
  bool augment = true;
  std::size_t threads = 1;

  void validate() const {
    if (epochs < 1 || batch < 1) throw ValidationError("train: epochs, batch >= 1");
    if (!(lr > 0)) throw ValidationError("train: lr must be > 0");
    if (stop_tolerance < 1 || reduce_tolerance < 1)
      throw ValidationError("train: tolerances must be >= 1");
    if (!(reduce_factor > 0 && reduce_factor < 1))
      throw ValidationError("train: reduce_factor must be in (0,1)");
    if (threads < 1) throw ValidationError("train: threads must be >= 1");
  }
};

// Early-stop / reduce-on-plateau bookkeeping, a pure function of the
// validation-loss sequence. "Improvement" means the loss undercuts the best
// seen so far by at least 1e-6; an improvement resets both wait counters,
// and a learning-rate cut restarts its own counter.
struct PlateauController {
  double best = std::numeric_limits<double>::infinity();
  std::size_t lr_wait = 0;
  std::size_t stop_wait = 0;

  struct Decision {
    bool improved = false;
    bool reduce_lr = false;
    bool stop = false;
  };

  Decision observe(double valid_loss, std::size_t reduce_tolerance,
                   std::size_t stop_tolerance) {
    Decision d;
    if (valid_loss <= best - 1e-6) {
      best = valid_loss;
      lr_wait = 0;
      stop_wait = 0;
      d.improved = true;
      return d;
    }
    ++lr_wait;
    ++stop_wait;
    if (lr_wait >= reduce_tolerance) {
      d.reduce_lr = true;
      lr_wait = 0;
    }
    if (stop_wait >= stop_tolerance) d.stop = true;
    return d;
  }
};

// RMSProp with per-tensor running squared-gradient state, keyed by the
// stable parameter names.
class RmsProp {
 public:
  explicit RmsProp(double decay = 0.9, double eps = 1e-8) : decay_(decay), eps_(eps) {
    if (!(decay > 0 && decay < 1)) throw ValidationError("rmsprop: decay in (0,1)");
    if (!(eps > 0)) throw ValidationError("rmsprop: eps must be > 0");
  }

  void step(std::vector<ParamRef>& params, const GradMap& grads, double lr) {
    for (ParamRef& p : params) {
      if (!p.trainable) continue;
      const auto it = grads.find(p.name);
      if (it == grads.end())
        throw RuntimeFailure("optimizer: no gradient for '" + p.name + "'");
      const Tensor& g = it->second;
      Tensor& w = *p.tensor;
      if (!g.same_shape(w))
        throw ValidationError("optimizer: gradient shape mismatch for '" + p.name +
                              "'");
      auto state = sq_.find(p.name);
      if (state == sq_.end()) state = sq_.emplace(p.name, Tensor(w.shape())).first;
      Tensor& sq = state->second;
      for (std::size_t i = 0; i < w.size(); ++i) {
        sq[i] = decay_ * sq[i] + (1.0 - decay_) * g[i] * g[i];
        w[i] -= lr * g[i] / (std::sqrt(sq[i]) + eps_);
      }
    }
  }

 private:
  double decay_, eps_;
  std::map<std::string, Tensor> sq_;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  double best_valid_loss = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t skipped_infeasible = 0;
  std::string stop_reason;
  std::string checkpoint_path;
  std::string history_path;
};

inline std::string format_history_csv(const std::vector<EpochStats>& history) {
  std::ostringstream ss;
  ss.precision(17);
  ss << "epoch,train_loss,valid_loss,lr\n";
  for (const EpochStats& e : history)
    ss << e.epoch << "," << e.train_loss << "," << e.valid_loss << "," << e.lr << "\n";
  return ss.str();
}

namespace detail {

struct PreparedSample {
  std::string id;
  GrayImage image;
  std::vector<std::size_t> label;
  Tensor tensor;  // preprocessed once when augmentation is off
};

inline std::vector<PreparedSample> prepare_samples(const std::vector<Sample>& samples,
                                                   const CharSet& charset,
                                                   const PreprocConfig& pcfg,
                                                   bool keep_tensor,
                                                   std::size_t threads) {
  std::vector<PreparedSample> out(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    PreparedSample& p = out[i];
    p.id = samples[i].id;
    p.image = read_pgm(samples[i].image_path);
    p.label = charset.encode(samples[i].transcript);
    if (keep_tensor) p.tensor = preprocess_line(p.image, pcfg).tensor;
  });
  return out;
}

struct SampleResult {
  double loss = 0.0;
  bool feasible = false;
  GradMap grads;
};

}  // namespace detail

// Full training loop: seeded shuffle each epoch, augmentation, CTC loss with
// the fused softmax gradient, one mean-gradient RMSProp step per batch, a
// validation pass per epoch, reduce-on-plateau and early stopping, and the
// best-validation checkpoint kept on disk. The model ends at the best
// weights. History goes to <out_dir>/history.csv as epoch,train_loss,
// valid_loss,lr rows.
inline TrainResult train(Model& model, const Partition& part, const TrainConfig& cfg,
                         const std::string& out_dir, std::ostream* log = nullptr) {
  cfg.validate();
  if (part.train.empty() || part.valid.empty())
    throw ValidationError("train: empty train or valid split");
  if (part.charset.size() != model.cfg.charset_size)
    throw ValidationError("train: partition charset size " +
                          std::to_string(part.charset.size()) +
                          " does not match the model's " +
                          std::to_string(model.cfg.charset_size));
  std::filesystem::create_directories(out_dir);

  PreprocConfig pcfg;
  pcfg.target_h = model.cfg.input_h;
  pcfg.target_w = model.cfg.input_w;

  const auto train_set = detail::prepare_samples(part.train, part.charset, pcfg,
                                                 !cfg.augment, cfg.threads);
  const auto valid_set =
      detail::prepare_samples(part.valid, part.charset, pcfg, true, cfg.threads);

  TrainResult result;
  result.checkpoint_path = out_dir + "/model.ckpt";
  result.history_path = out_dir + "/history.csv";

  std::vector<ParamRef> params = collect_params(model);
  RmsProp optimizer;
  PlateauController controller;
  double lr = cfg.lr;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, 0x73687566ull, epoch));
    shuffle_rng.shuffle(order);

    double train_loss_sum = 0.0;
    std::size_t train_loss_count = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t count = std::min(cfg.batch, order.size() - start);
      std::vector<detail::SampleResult> results(count);
      parallel_for(count, cfg.threads, [&](std::size_t b) {
        const std::size_t idx = order[start + b];
        const detail::PreparedSample& s = train_set[idx];
        Rng rng(derive_seed(cfg.seed, 0x74726e731ull, epoch, idx));
        Tensor x;
        if (cfg.augment) {
          const AugmentParams ap = draw_augment_params(rng);
          x = preprocess_line(augment_with_params(s.image, ap), pcfg).tensor;
        } else {
          x = s.tensor;
        }
        ForwardCache fc;
        const Tensor probs = model_forward_train(model, x, rng, fc);
        const CtcLoss loss = ctc_loss(probs, s.label);
        if (!loss.feasible) return;
        results[b].loss = loss.value;
        results[b].feasible = true;
        results[b].grads = model_backward(model, fc, loss.grad);
      });

      GradMap batch_grads;
      std::size_t feasible = 0;
      for (const auto& r : results)
        if (r.feasible) ++feasible;
      for (std::size_t b = 0; b < count; ++b) {
        if (!results[b].feasible) {
          ++result.skipped_infeasible;
          if (log)
            *log << "warning: skipped sample '" << train_set[order[start + b]].id
                 << "' (label longer than the output sequence)\n";
          continue;
        }
        grad_accumulate(batch_grads, results[b].grads,
                        1.0 / static_cast<double>(feasible));
        train_loss_sum += results[b].loss;
        ++train_loss_count;
      }
      if (feasible > 0) optimizer.step(params, batch_grads, lr);
    }
    if (train_loss_count == 0)
      throw RuntimeFailure("train: every sample in epoch " + std::to_string(epoch) +
                           " was infeasible");
    const double train_loss = train_loss_sum / static_cast<double>(train_loss_count);

    std::vector<double> valid_losses(valid_set.size(),
                                     std::numeric_limits<double>::quiet_NaN());
    parallel_for(valid_set.size(), cfg.threads, [&](std::size_t i) {
      const Tensor probs = model_forward(model, valid_set[i].tensor);
      const CtcLoss loss = ctc_loss(probs, valid_set[i].label);
      if (loss.feasible) valid_losses[i] = loss.value;
    });
    double valid_loss_sum = 0.0;
    std::size_t valid_loss_count = 0;
    for (double v : valid_losses) {
      if (std::isnan(v)) continue;
      valid_loss_sum += v;
      ++valid_loss_count;
    }
    if (valid_loss_count == 0)
      throw RuntimeFailure("train: no feasible validation sample in epoch " +
                           std::to_string(epoch));
    const double valid_loss = valid_loss_sum / static_cast<double>(valid_loss_count);
    if (!std::isfinite(train_loss) || !std::isfinite(valid_loss))
      throw RuntimeFailure("train: non-finite loss at epoch " + std::to_string(epoch) +
                           " (train " + std::to_string(train_loss) + ", valid " +
                           std::to_string(valid_loss) + ")");

    result.history.push_back(EpochStats{epoch, train_loss, valid_loss, lr});
    write_text_file(result.history_path, format_history_csv(result.history));

    const PlateauController::Decision d =
        controller.observe(valid_loss, cfg.reduce_tolerance, cfg.stop_tolerance);
    if (d.improved) {
      result.best_valid_loss = valid_loss;
      result.best_epoch = epoch;
      save_checkpoint(result.checkpoint_path, model);
    }
    if (d.reduce_lr) lr *= cfg.reduce_factor;
    if (log)
      *log << "epoch " << epoch << "  train " << train_loss << "  valid " << valid_loss
           << "  lr " << lr << (d.improved ? "  *" : "") << "\n";
    if (d.stop) {
      result.stop_reason = "no validation improvement for " +
                           std::to_string(cfg.stop_tolerance) + " epochs";
      break;
    }
  }
  if (result.stop_reason.empty()) result.stop_reason = "epoch cap reached";

  model = load_checkpoint(result.checkpoint_path);
  return result;
}

// ---------------------------------------------------------------------------
// Prediction

struct Prediction {
  std::string text;        // lexicon-constrained decode
  double score = 0.0;      // its beam score (log domain)
  std::string best_path;   // greedy baseline
};

inline Prediction predict(const Model& model, const GrayImage& img,
                          const CharSet& charset, const PrefixTree& tree,
                          const WordLM& lm, const DecoderConfig& dcfg) {
  if (charset.size() != model.cfg.charset_size)
    throw ValidationError("predict: decoder charset size " +
                          std::to_string(charset.size()) +
                          " does not match the checkpoint's " +
                          std::to_string(model.cfg.charset_size));
  PreprocConfig pcfg;
  pcfg.target_h = model.cfg.input_h;
  pcfg.target_w = model.cfg.input_w;
  const Tensor x = preprocess_line(img, pcfg).tensor;
  const Tensor probs = model_forward(model, x);

  // Batch-of-one through the axis swap, the same path a batched caller takes.
  Tensor raw({1, probs.dim(0), probs.dim(1)});
  for (std::size_t i = 0; i < probs.size(); ++i) raw[i] = probs[i];
  const std::vector<Tensor> mats = swap_axes_for_decoder(raw);

  Prediction p;
  const WbsDecodeResult r = wbs_decode_scored(mats[0], tree, lm, charset, dcfg);
  p.text = r.text;
  p.score = r.score;
  p.best_path = best_path_decode(mats[0], charset);
  return p;
}

}  // namespace htr
