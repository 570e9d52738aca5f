#pragma once

#include <Eigen/Core>
#include <vector>

#include "flmkt/core.hpp"
#include "flmkt/mechanism.hpp"
#include "flmkt/tinynet.hpp"
#include "json.hpp"

namespace flmkt {

// Per-feature running mean/variance (Welford) producing clipped z-scores.
class RunningStats {
 public:
  explicit RunningStats(int dim = 0);

  void update(const Eigen::VectorXd& x);
  Eigen::VectorXd normalize(const Eigen::VectorXd& x) const;
  int dim() const { return static_cast<int>(mean_.size()); }
  long long count() const { return count_; }
  const Eigen::VectorXd& mean() const { return mean_; }
  Eigen::VectorXd variance() const;

  nlohmann::json to_json() const;
  static RunningStats from_json(const nlohmann::json& j);

 private:
  Eigen::VectorXd mean_;
  Eigen::VectorXd m2_;
  long long count_ = 0;
};

// The broker's view of one round, one normalized feature block per
// authorized seller: [own perf, own repr, others' perfs, others' reprs],
// others in ascending client id.
struct MarketState {
  std::vector<ClientId> sellers;
  std::vector<Eigen::VectorXd> blocks;
  int block_dim = 0;
};

int state_block_dim(int n_clients, int repr_dim);

MarketState build_state(const Eigen::VectorXd& perfs, const Eigen::MatrixXd& reprs,
                        const std::vector<ClientId>& sellers, RunningStats& stats,
                        bool update_stats);

// scores = bids (*) pi, column per seller; pi columns must be proper
// distributions over eligible buyers (or all-zero when nobody bids).
Eigen::MatrixXd allocation_scores(const Eigen::MatrixXd& bids, const Eigen::MatrixXd& pi,
                                  const std::vector<ClientId>& sellers);

// Sum over clients of revenue minus the shortfall below the floor.
double shaped_reward(const Eigen::VectorXd& revenues, double threshold);

struct TdStep {
  double reward = 0.0;
  double v_now = 0.0;
  double v_next = 0.0;
  double td_target = 0.0;  // reward + v_next
  double td_error = 0.0;   // v_now - td_target
};

struct RlAllocatorConfig {
  int n_clients = 0;
  int repr_dim = 0;
  double alpha = 5e-4;  // value net learning rate
  double beta = 5e-4;   // policy net learning rate
  std::vector<int> hidden = {1024, 256, 64};  // rescaled to the block size
  std::uint64_t init_seed = 0;

  void validate() const;
};

// Actor plus critic over per-seller blocks. The policy MLP is shared
// across sellers and emits one logit per buyer; the critic encodes each
// block, mean-pools, and regresses the undiscounted return to go.
class RlAllocator {
 public:
  explicit RlAllocator(const RlAllocatorConfig& config);

  struct Decision {
    Eigen::MatrixXd pi;      // buyer distribution per seller column
    Eigen::MatrixXd scores;  // bids (*) pi
    BoolMatrix winners;
    std::vector<SellerRanking> rankings;             // per authorized seller
    std::vector<std::vector<ClientId>> winners_by_buyer;
    std::vector<net::TapeD> tapes;                   // per authorized seller
    std::vector<Eigen::VectorXd> pis;                // per authorized seller
  };

  // Normalized state for this round; running stats advance unless frozen.
  MarketState observe(const Eigen::VectorXd& perfs, const Eigen::MatrixXd& reprs,
                      const std::vector<ClientId>& sellers);
  // State against current stats without advancing them (bootstrap target).
  MarketState peek(const Eigen::VectorXd& perfs, const Eigen::MatrixXd& reprs,
                   const std::vector<ClientId>& sellers) const;

  Decision decide(const MarketState& state, const Eigen::MatrixXd& bids, int copies_k) const;

  double value(const MarketState& state) const;
  TdStep td(double reward, const MarketState& s_now, const MarketState& s_next,
            bool terminal) const;

  // One actor-critic step; no-op when frozen.
  void update(const TdStep& td, const MarketState& s_now, const Decision& decision);

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }
  const RunningStats& stats() const { return stats_; }
  const RlAllocatorConfig& config() const { return config_; }

  nlohmann::json checkpoint() const;
  void restore(const nlohmann::json& j);

 private:
  struct ValueEval {
    double v = 0.0;
    std::vector<net::TapeD> enc_tapes;
    net::TapeD trunk_tape;
    Eigen::VectorXd pooled;  // pre-activation
  };
  ValueEval value_eval(const MarketState& state) const;

  RlAllocatorConfig config_;
  net::DenseNetD policy_;
  net::DenseNetD value_encoder_;
  net::DenseNetD value_trunk_;
  RunningStats stats_;
  bool frozen_ = false;
};

}  // namespace flmkt
