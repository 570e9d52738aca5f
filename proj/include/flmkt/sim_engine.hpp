#pragma once

#include <Eigen/Core>
#include <memory>
#include <string>
#include <vector>

#include "flmkt/bidding.hpp"
#include "flmkt/core.hpp"
#include "flmkt/fl_env.hpp"
#include "flmkt/mechanism.hpp"
#include "flmkt/rl_allocator.hpp"
#include "json.hpp"

namespace flmkt {

enum class UtilityDistribution { kUniform01, kAbsNormal01 };
enum class AllocatorKind { kRl, kGsp, kRandom };
enum class LearnerKind { kSynthetic, kRealMlp };

struct Seeds {
  std::uint64_t train = 1;
  std::uint64_t eval = 2;
  std::uint64_t test = 3;
};

struct DatasetPaths {
  std::string csv;
  std::string images;
  std::string labels;
};

// The complete experiment record: everything a run depends on lives here.
struct SimConfig {
  int n_clients = 10;
  int train_rounds = 200;
  int test_rounds = 100;
  int copies_k = 5;
  double seller_ratio = 0.7;
  double eta = 0.005;  // fairness floor as a fraction of the round's top revenue
  UtilityDistribution utility_distribution = UtilityDistribution::kUniform01;
  Strategy strategy = Strategy::kStochastic;
  AllocatorKind allocator = AllocatorKind::kRl;
  LearnerKind learner = LearnerKind::kSynthetic;
  double alpha = 5e-4;
  double beta = 5e-4;
  double exploration_fraction = 0.2;
  double epsilon = 0.1;
  Seeds seeds;
  int repr_dim = 64;
  int pretrain_epochs = 20;
  double dirichlet_alpha = 0.1;
  DatasetPaths dataset;
  SyntheticParams synthetic;
  MlpParams mlp;

  void validate() const;
  nlohmann::json to_json() const;
  static SimConfig from_json(const nlohmann::json& j);
  static SimConfig load(const std::string& path);
};

struct RoundMetrics {
  int round = 0;
  double volume = 0.0;
  double mean_accuracy = 0.0;
  double reward = 0.0;
  double td_error = 0.0;
};

struct MetricsReport {
  std::vector<RoundMetrics> rounds;
  Eigen::VectorXd client_revenue;   // cumulative per client
  Eigen::VectorXd client_accuracy;  // final per client
  double cumulative_volume = 0.0;
  double final_mean_accuracy = 0.0;
  double bottom_decile_accuracy = 0.0;
  double bottom_decile_revenue = 0.0;

  void finalize();
};

double fairness_threshold(const Eigen::VectorXd& revenues, double eta);

// One seeded market: population, buyer profiles, allocator wiring, and the
// per-round loop of authorize, bid, allocate, deliver, settle, learn.
class MarketEnv {
 public:
  struct RoundResult {
    RoundLedger ledger;
    Eigen::VectorXd deltas;
    Eigen::VectorXd revenues;
    double threshold = 0.0;
    double reward = 0.0;
    TdStep td;
    bool td_valid = false;
  };

  MarketEnv(const SimConfig& config, std::uint64_t world_seed, std::uint64_t env_seed,
            int total_rounds, bool training, std::shared_ptr<RlAllocator> allocator,
            std::shared_ptr<const Dataset> dataset);

  RoundResult run_round(int round);

  int n_clients() const { return config_.n_clients; }
  const Eigen::VectorXd& perfs() const { return perfs_; }
  const Eigen::MatrixXd& reprs() const { return reprs_; }
  const Eigen::VectorXd& baselines() const { return baselines_; }
  const std::vector<BuyerProfile>& profiles() const { return profiles_; }
  const std::vector<PerfRecord>& records() const { return records_; }
  const DirichletPartition* partition() const {
    return partition_.client_index_sets.empty() ? nullptr : &partition_;
  }

 private:
  void allocate_rl(int round, RoundResult& out, const std::vector<ClientId>& authorized,
                   MarketState& state, RlAllocator::Decision& decision);
  void allocate_gsp(RoundResult& out, const std::vector<ClientId>& authorized);
  void allocate_random(int round, RoundResult& out, const std::vector<ClientId>& authorized,
                       std::vector<SellerRanking>& rankings);

  SimConfig config_;
  std::uint64_t env_seed_ = 0;
  int total_rounds_ = 0;
  bool training_ = false;
  std::shared_ptr<RlAllocator> allocator_;
  MechanismParams mech_;
  std::vector<std::unique_ptr<Learner>> learners_;
  std::vector<PerfRecord> records_;
  std::vector<BuyerProfile> profiles_;
  std::vector<RevenueAccount> accounts_;
  DirichletPartition partition_;
  Eigen::VectorXd baselines_;
  Eigen::VectorXd perfs_;
  Eigen::MatrixXd reprs_;
};

struct ExperimentOutput {
  MetricsReport train_metrics;
  MetricsReport test_metrics;
  std::vector<std::string> train_ledger;  // JSON lines
  std::vector<std::string> test_ledger;
  nlohmann::json allocator_checkpoint;  // null unless the allocator learns
  nlohmann::json partition;             // null unless a dataset was partitioned
  nlohmann::json resolved_config;
};

// Trains under the train seed (RL only), freezes, then replays a fresh
// market under the test seed with no learning.
ExperimentOutput run_experiment(const SimConfig& config);

std::string metrics_to_csv(const MetricsReport& report);
nlohmann::json summary_to_json(const SimConfig& config, const MetricsReport& train,
                               const MetricsReport& test);

}  // namespace flmkt
