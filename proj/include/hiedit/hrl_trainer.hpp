#pragma once

// Sequential editing as a two-level decision process: the selector picks K
// slots per edit, the low-level networks produce the slot updates, and both
// are trained from the per-step editing losses of whole trajectories.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hiedit/hypernets.hpp"
#include "hiedit/knowledge_stream.hpp"
#include "hiedit/toy_lm.hpp"

namespace hiedit {

enum class RewardMode { full, rand, none };
enum class SelectMode { hinet, random, gradnorm, all };

std::string to_string(RewardMode m);
std::string to_string(SelectMode m);
RewardMode parse_reward_mode(const std::string& s);
SelectMode parse_select_mode(const std::string& s);

struct TrainConfig {
  double eta = 0.01;        // update-norm penalty
  double mu = 0.8;          // backtracking decay
  double kl_weight = 1.0;
  std::size_t window = 10;  // previously edited facts revisited by the loss
  double gamma = 1.0;
  std::size_t epochs = 30;
  double lr_high = 1e-2;
  double lr_low = 1e-2;
  double clip = 1.0;
  RewardMode reward_mode = RewardMode::full;
  SelectMode select_mode = SelectMode::hinet;
  bool rl_training = true;
  std::uint64_t seed = 5;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct StepLog {
  std::size_t t = 0;
  std::vector<double> mask;
  std::vector<double> z;  // empty unless the selector produced scores
  double loss = 0.0;
  std::optional<double> cf_loss;
  double r_low = 0.0;
  double r_high = 0.0;
  std::vector<double> update_norms;  // Frobenius norm of every slot's proposed update
  bool window_empty = false;

  bool operator==(const StepLog&) const = default;
};

struct TrajectoryResult {
  std::vector<StepLog> steps;
  double J_high = 0.0;
  double J_low = 0.0;
  LMWeights final_model;

  bool operator==(const TrajectoryResult&) const = default;
};

struct EditState {
  LMWeights weights;
  std::size_t t = 0;
  std::deque<FactRecord> history;  // most recent edits, oldest first
};

struct Selection {
  ad::Tensor mask;
  ad::Tensor z;  // invalid unless mode == hinet
};

// et is only consulted in hinet mode.
Selection select_layers(ad::Tape& tape, SelectMode mode, const DecomposedGrad& grads, const EditorTensors* et,
                        std::size_t K, std::mt19937_64& rng);

struct LossTerms {
  ad::Tensor total;
  bool window_empty = false;
};

// η·‖ΔW‖² + Σ_j μ^(n−1−j) [−log p_cur(y_j | x_j) + λ̃·KL(p_prev(·|x̃_j) ‖ p_cur(·|x̃_j))]
// over window[0..n), where window.back() is the current edit.
LossTerms editing_loss(const LMConfig& cfg, const LmTensors& current, const LMWeights& previous,
                       std::span<const FactRecord> window, const ad::Tensor& update_sq_norm, const TrainConfig& tc);

double low_reward(double loss);
double high_reward(double masked_loss, std::optional<double> full_loss, RewardMode mode,
                   std::optional<double> rand_loss = std::nullopt);

struct StepOutput {
  StepLog log;
  ad::Tensor loss;     // masked editing loss on the tape
  ad::Tensor cf_loss;  // counterfactual loss, invalid when reward_mode == none
  LMWeights next;
};

// One transition W_{t−1} → W_t. The incoming weights are constants on `tape`.
StepOutput edit_step(ad::Tape& tape, const EditState& state, const FactRecord& record, const EditorTensors& et,
                     const TrainConfig& tc, std::mt19937_64& rng);

// Advances `state` past `out`.
void commit_step(EditState& state, StepOutput&& out, const FactRecord& record, const TrainConfig& tc);

TrajectoryResult run_trajectory(const Editor& editor, const LMWeights& base, const EditStream& stream,
                                const TrainConfig& tc);

// Single-level reference: every slot receives its low-level update, no selector.
LMWeights single_level_step(const Editor& editor, const LMWeights& w, const FactRecord& record);

struct EpochStats {
  std::size_t epoch = 0;
  double J_high = 0.0;
  double J_low = 0.0;
  double grad_norm_high = 0.0;
  double grad_norm_low = 0.0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Per epoch: reset to `base`, run the stream, then ascend J_low in θ and J_high in φ.
std::vector<EpochStats> train_editor(Editor& editor, const LMWeights& base, const EditStream& stream,
                                     const TrainConfig& tc, const EpochCallback& on_epoch = {});

void save_trajlog(std::span<const StepLog> logs, const std::filesystem::path& path);
std::vector<StepLog> load_trajlog(const std::filesystem::path& path);

}  // namespace hiedit
