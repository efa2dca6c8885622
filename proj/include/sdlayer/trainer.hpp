#pragma once

// Semi-supervised training: mixed labeled/unlabeled batches, loss routing,
// MADGRAD (or Adam) updates with global gradient-norm clipping, periodic
// validation with RMSE-based best-model selection, and resumable
// checkpointing. All randomness is drawn from seed-derived streams, so a
// (config, seed) pair reproduces runs bit for bit.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdlayer/checkpoint.hpp"
#include "sdlayer/losses.hpp"
#include "sdlayer/networks.hpp"
#include "sdlayer/synthdata.hpp"

namespace sdlayer::train {

struct TrainConfig {
  std::int64_t batch_labeled = 7;
  std::int64_t batch_unlabeled = 7;
  double learning_rate = 1e-4;
  double grad_clip_norm = 0.5;
  std::int64_t iterations = 300;
  std::int64_t val_every = 25;
  std::uint64_t seed = 42;
  std::string optimizer = "madgrad";  // "madgrad" | "adam"
  double madgrad_momentum = 0.9;
  losses::LossWeights weights;
  std::int64_t prior_delta = 10;
  double prior_t = 1.0;
  double prior_sigma = 0.5;
  bool disable_texture_head = false;  // "without conv-t" ablation
  bool disable_self_losses = false;   // "without L_self": lambda3..6 forced to 0
  bool priors_on_all = false;         // apply the priors to labeled samples too
  double labeled_subset_fraction = 1.0;
  double flip_probability = 0.3;
  double val_fraction = 0.15;  // volume-wise split when no val set is given

  void validate() const;
  // Weights after applying the ablation flags.
  losses::LossWeights effective_weights() const;
};

struct EvalReport {
  std::vector<double> per_surface_rmse;  // averaged over B-scans (px)
  std::vector<double> per_surface_std;   // std across B-scans (px)
  double mean_rmse = 0.0;                // mean of B-scan-wise RMSE
  double std_rmse = 0.0;                 // std across B-scans
  std::int64_t ordering_violations = 0;
  double masked_recon_mae = 0.0;
  std::int64_t scans = 0;
};

class Optimizer {
 public:
  explicit Optimizer(double lr) : lr_(lr) {}
  virtual ~Optimizer() = default;
  virtual void step(nn::ParamStore& params) = 0;
  virtual std::string type() const = 0;
  virtual std::vector<std::pair<std::string, Tensor>> export_slots(const nn::ParamStore& params) const = 0;
  virtual void import_slots(const nn::ParamStore& params,
                            const std::vector<std::pair<std::string, Tensor>>& slots) = 0;
  std::int64_t steps_done() const { return steps_; }
  void set_steps_done(std::int64_t k) { steps_ = k; }

 protected:
  double lr_;
  std::int64_t steps_ = 0;
};

// Dual-averaged adaptive update anchored at the initial weights
// (momentumized MADGRAD; lambda_k = lr * sqrt(k+1), cube-root denominator).
class Madgrad : public Optimizer {
 public:
  Madgrad(double lr, double momentum = 0.9, double eps = 1e-6)
      : Optimizer(lr), momentum_(momentum), eps_(eps) {}
  void step(nn::ParamStore& params) override;
  std::string type() const override { return "madgrad"; }
  std::vector<std::pair<std::string, Tensor>> export_slots(const nn::ParamStore& params) const override;
  void import_slots(const nn::ParamStore& params,
                    const std::vector<std::pair<std::string, Tensor>>& slots) override;

 private:
  void ensure_state(const nn::ParamStore& params);
  double momentum_, eps_;
  std::vector<Tensor> grad_sum_sq_, s_, x0_;
};

class Adam : public Optimizer {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : Optimizer(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(nn::ParamStore& params) override;
  std::string type() const override { return "adam"; }
  std::vector<std::pair<std::string, Tensor>> export_slots(const nn::ParamStore& params) const override;
  void import_slots(const nn::ParamStore& params,
                    const std::vector<std::pair<std::string, Tensor>>& slots) override;

 private:
  void ensure_state(const nn::ParamStore& params);
  double beta1_, beta2_, eps_;
  std::vector<Tensor> m_, v_;
};

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& cfg);

struct StepResult {
  losses::LossBreakdown breakdown;
  double grad_norm = 0.0;  // post-clip global norm
  double grad_norm_raw = 0.0;
  std::int64_t supervised_samples = 0;  // instrumentation: label-leak guard
  std::int64_t self_supervised_samples = 0;
};

// One optimizer update on a mixed batch (labeled samples first).
StepResult train_step(networks::Model& model, Optimizer& opt,
                      const std::vector<synth::Sample>& batch, const TrainConfig& cfg,
                      const losses::PriorConstants& priors, std::mt19937_64& noise_rng);

// Forward-only surface prediction (rectified positions), batched internally.
std::vector<Tensor> predict_surfaces(const networks::Model& model,
                                     const std::vector<const synth::Sample*>& samples);

EvalReport evaluate(const networks::Model& model, const synth::Dataset& dataset);

// argmin of mean validation RMSE over checkpoint files; earliest wins ties.
std::size_t select_best(const std::vector<std::string>& checkpoint_paths,
                        const synth::Dataset& val_dataset);

// Keeps a labeled fraction (>= one per volume); the rest join the unlabeled pool.
synth::Dataset subset_labels(const synth::Dataset& dataset, double fraction, std::uint64_t seed);

// Deterministic volume-wise split: the last ceil(val_fraction * volumes)
// volumes become the validation set.
std::pair<synth::Dataset, synth::Dataset> split_by_volume(const synth::Dataset& dataset,
                                                          double val_fraction);

losses::PriorConstants derive_priors_from_dataset(const synth::Dataset& dataset,
                                                  const TrainConfig& cfg);

struct TrainResult {
  std::string best_checkpoint_path;
  std::string last_checkpoint_path;
  double best_val_rmse = 0.0;
  std::int64_t best_step = -1;
  std::int64_t final_step = 0;
  EvalReport initial_val_report;
  EvalReport final_val_report;  // of the best model
};

// Full loop: writes train_log.tsv / val_log.tsv / best.ckpt / last.ckpt under
// out_dir. `config_echo` is stored in the checkpoints; pass the resolved app
// config. Resumes from last.ckpt when `resume` is set and the file exists.
TrainResult run_training(networks::Model& model, synth::Dataset train_set,
                         const synth::Dataset& val_set, const TrainConfig& cfg,
                         const std::string& out_dir, const nlohmann::json& config_echo,
                         bool resume = false);

void load_model_params(networks::Model& model, const ckpt::Checkpoint& c);

}  // namespace sdlayer::train
