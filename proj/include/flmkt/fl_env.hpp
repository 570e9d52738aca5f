#pragma once

#include <Eigen/Core>
#include <memory>
#include <string>
#include <vector>

#include "flmkt/core.hpp"
#include "flmkt/errors.hpp"
#include "flmkt/rng.hpp"
#include "flmkt/tinynet.hpp"
#include "json.hpp"

namespace flmkt {

// A client's local training stack. Implementations must be deterministic
// given construction seeds; evaluate() is a fraction in [0, 1].
class Learner {
 public:
  virtual ~Learner() = default;
  virtual void pretrain_isolated(int epochs) = 0;
  virtual void local_update() = 0;
  virtual double evaluate() const = 0;
  virtual Eigen::VectorXd parameters() const = 0;
  virtual void set_parameters(const Eigen::VectorXd& params) = 0;
  virtual Eigen::VectorXd last_layer_repr() const = 0;
  virtual int sample_count() const = 0;
};

// Sample-count-weighted parameter mean. Weights sum to 1 and the order of
// (model, count) pairs does not matter beyond float rounding.
Eigen::VectorXd fedavg_aggregate(const std::vector<Eigen::VectorXd>& models,
                                 const Eigen::VectorXd& counts);

// ---------------------------------------------------------------------------
// Synthetic environment: a quadratic-bowl world where "accuracy" is an
// analytic function of the distance to a private optimum. Fast, and the
// effect of every trade is computable by hand.

struct SyntheticParams {
  int dim = 8;
  double lr_local = 0.05;     // pull toward the private optimum per update
  double noise_scale = 0.05;  // update noise, keeps isolated training stuck
  double sigma = 4.0;         // width of the accuracy surrogate
  int clusters = 2;           // clients split evenly into optimum clusters
  double separation = 6.0;    // distance between cluster centers
  double spread = 0.5;        // client optimum scatter within a cluster
  double init_offset = 2.0;   // starting distance from the own optimum
  int samples_min = 50;
  int samples_max = 150;

  void validate() const;
};

class SyntheticLearner : public Learner {
 public:
  SyntheticLearner(Eigen::VectorXd w0, Eigen::VectorXd optimum, double lr_local,
                   double noise_scale, double sigma, int samples, int repr_dim,
                   std::uint64_t noise_seed);

  void pretrain_isolated(int epochs) override;
  void local_update() override;
  double evaluate() const override;
  Eigen::VectorXd parameters() const override { return w_; }
  void set_parameters(const Eigen::VectorXd& params) override;
  Eigen::VectorXd last_layer_repr() const override;
  int sample_count() const override { return samples_; }

  const Eigen::VectorXd& optimum() const { return optimum_; }

 private:
  Eigen::VectorXd w_;
  Eigen::VectorXd optimum_;
  double lr_local_;
  double noise_scale_;
  double sigma_;
  int samples_;
  int repr_dim_;
  rng::Engine eng_;
};

std::vector<std::unique_ptr<Learner>> make_synthetic_population(const SyntheticParams& params,
                                                                int n_clients, int repr_dim,
                                                                std::uint64_t world_seed,
                                                                std::uint64_t env_seed);

// ---------------------------------------------------------------------------
// Real data path: digit images, Dirichlet non-IID partition, tiny MLP.

struct Dataset {
  Eigen::MatrixXd features;  // n x d, scaled into [0, 1]
  Eigen::VectorXi labels;
  int n_classes = 0;

  int size() const { return static_cast<int>(features.rows()); }
  int dim() const { return static_cast<int>(features.cols()); }
};

// Big-endian IDX pair (0x00000803 images, 0x00000801 labels).
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
Dataset load_idx_streams(std::istream& images, std::istream& labels);
// Rows of "label,pixel,pixel,...".
Dataset load_csv(const std::string& path);

struct DirichletPartition {
  double alpha = 0.1;
  std::vector<std::vector<int>> client_index_sets;
};

// Per class, splits that class's samples by Dirichlet(alpha) proportions.
// Draws violating the per-client floor are redrawn, at most 100 times.
DirichletPartition dirichlet_partition(const Eigen::VectorXi& labels, int n_clients, double alpha,
                                       rng::Engine& eng, int min_per_client = 1);

nlohmann::json partition_to_json(const DirichletPartition& partition);
DirichletPartition partition_from_json(const nlohmann::json& j);

struct MlpParams {
  int hidden = 200;
  double lr = 0.05;
  int batch = 32;
  double test_fraction = 0.2;  // per-client local holdout

  void validate() const;
};

class MlpLearner : public Learner {
 public:
  MlpLearner(std::shared_ptr<const Dataset> data, std::vector<int> train_idx,
             std::vector<int> test_idx, const MlpParams& params, int repr_dim,
             std::uint64_t init_seed, std::uint64_t shuffle_seed);

  void pretrain_isolated(int epochs) override;
  void local_update() override;
  double evaluate() const override;
  Eigen::VectorXd parameters() const override { return net::param_vector(net_); }
  void set_parameters(const Eigen::VectorXd& params) override;
  Eigen::VectorXd last_layer_repr() const override;
  int sample_count() const override { return static_cast<int>(train_idx_.size()); }

 private:
  void run_epoch();

  std::shared_ptr<const Dataset> data_;
  std::vector<int> train_idx_;
  std::vector<int> test_idx_;
  net::DenseNetD net_;
  double lr_;
  int batch_;
  int repr_dim_;
  rng::Engine eng_;
};

struct MlpPopulation {
  std::vector<std::unique_ptr<Learner>> learners;
  DirichletPartition partition;
};

MlpPopulation make_mlp_population(const MlpParams& params, std::shared_ptr<const Dataset> data,
                                  int n_clients, double alpha, int repr_dim,
                                  std::uint64_t world_seed, std::uint64_t env_seed);

// ---------------------------------------------------------------------------
// Round dynamics shared by both environments.

struct EnvStepResult {
  Eigen::VectorXd perfs;   // post-round performance per client
  Eigen::VectorXd deltas;  // round-over-round gain difference per client
  Eigen::MatrixXd reprs;   // n_clients x repr_dim
};

// Delivers FedAvg bundles to buyers with wins, then every client runs one
// local update and is re-evaluated. Seller models are snapshotted before
// any delivery, so a client that both sells and buys sells its pre-round
// model.
EnvStepResult env_step(const std::vector<std::vector<ClientId>>& winners_by_buyer,
                       const std::vector<ClientId>& authorized,
                       std::vector<std::unique_ptr<Learner>>& learners,
                       std::vector<PerfRecord>& records);

// Local-only training that establishes each client's baseline performance.
Eigen::VectorXd isolated_pretrain(std::vector<std::unique_ptr<Learner>>& learners, int epochs,
                                  std::vector<PerfRecord>& records);

Eigen::MatrixXd collect_reprs(const std::vector<std::unique_ptr<Learner>>& learners);

}  // namespace flmkt
