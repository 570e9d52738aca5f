#include "flmkt/fl_env.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

namespace flmkt {

namespace {

int uniform_int(rng::Engine& eng, int n) {
  const int v = static_cast<int>(rng::uniform01(eng) * n);
  return std::min(v, n - 1);
}

template <typename T>
void shuffle_vec(std::vector<T>& v, rng::Engine& eng) {
  for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
    const int j = uniform_int(eng, i + 1);
    std::swap(v[i], v[static_cast<std::size_t>(j)]);
  }
}

Eigen::VectorXd unit_direction(rng::Engine& eng, int dim) {
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v(i) = rng::normal(eng);
  const double norm = v.norm();
  if (norm == 0.0) {
    v.setZero();
    v(0) = 1.0;
    return v;
  }
  return v / norm;
}

Eigen::VectorXd fit_length(const Eigen::VectorXd& v, int len) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(len);
  const Eigen::Index take = std::min<Eigen::Index>(v.size(), len);
  out.head(take) = v.head(take);
  return out;
}

}  // namespace

Eigen::VectorXd fedavg_aggregate(const std::vector<Eigen::VectorXd>& models,
                                 const Eigen::VectorXd& counts) {
  if (models.empty()) throw StructuralError("fedavg_aggregate: no models");
  if (counts.size() != static_cast<Eigen::Index>(models.size()))
    throw StructuralError("fedavg_aggregate: count list length mismatch");
  const Eigen::Index dim = models.front().size();
  for (const auto& m : models)
    if (m.size() != dim) throw StructuralError("fedavg_aggregate: model length mismatch");
  if ((counts.array() <= 0.0).any())
    throw StructuralError("fedavg_aggregate: sample counts must be positive");
  const double total = counts.sum();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(dim);
  for (std::size_t i = 0; i < models.size(); ++i) out += (counts(i) / total) * models[i];
  return out;
}

// --------------------------------------------------------------------------
// Synthetic environment

void SyntheticParams::validate() const {
  if (dim < 1) throw ConfigError("synthetic: dim must be positive");
  if (lr_local <= 0.0 || lr_local > 1.0) throw ConfigError("synthetic: lr_local must be in (0, 1]");
  if (noise_scale < 0.0) throw ConfigError("synthetic: noise_scale must be non-negative");
  if (sigma <= 0.0) throw ConfigError("synthetic: sigma must be positive");
  if (clusters < 1) throw ConfigError("synthetic: clusters must be positive");
  if (separation < 0.0) throw ConfigError("synthetic: separation must be non-negative");
  if (spread < 0.0) throw ConfigError("synthetic: spread must be non-negative");
  if (init_offset < 0.0) throw ConfigError("synthetic: init_offset must be non-negative");
  if (samples_min < 1 || samples_max < samples_min)
    throw ConfigError("synthetic: sample count range is empty");
}

SyntheticLearner::SyntheticLearner(Eigen::VectorXd w0, Eigen::VectorXd optimum, double lr_local,
                                   double noise_scale, double sigma, int samples, int repr_dim,
                                   std::uint64_t noise_seed)
    : w_(std::move(w0)),
      optimum_(std::move(optimum)),
      lr_local_(lr_local),
      noise_scale_(noise_scale),
      sigma_(sigma),
      samples_(samples),
      repr_dim_(repr_dim),
      eng_(noise_seed) {
  if (w_.size() != optimum_.size())
    throw StructuralError("SyntheticLearner: parameter/optimum dim mismatch");
}

void SyntheticLearner::pretrain_isolated(int epochs) {
  for (int e = 0; e < epochs; ++e) local_update();
}

void SyntheticLearner::local_update() {
  w_ -= lr_local_ * (w_ - optimum_);
  if (noise_scale_ > 0.0) {
    for (Eigen::Index i = 0; i < w_.size(); ++i) w_(i) += noise_scale_ * rng::normal(eng_);
  }
}

double SyntheticLearner::evaluate() const {
  return std::exp(-(w_ - optimum_).squaredNorm() / sigma_);
}

void SyntheticLearner::set_parameters(const Eigen::VectorXd& params) {
  if (params.size() != w_.size())
    throw StructuralError("SyntheticLearner: set_parameters dim mismatch");
  w_ = params;
}

Eigen::VectorXd SyntheticLearner::last_layer_repr() const { return fit_length(w_, repr_dim_); }

std::vector<std::unique_ptr<Learner>> make_synthetic_population(const SyntheticParams& params,
                                                                int n_clients, int repr_dim,
                                                                std::uint64_t world_seed,
                                                                std::uint64_t env_seed) {
  params.validate();
  if (n_clients < 2) throw ConfigError("make_synthetic_population: need at least 2 clients");
  auto eng = rng::child(world_seed, {static_cast<std::uint64_t>(rng::Stream::kWorld)});

  std::vector<Eigen::VectorXd> centers;
  const Eigen::VectorXd axis = unit_direction(eng, params.dim);
  for (int c = 0; c < params.clusters; ++c) {
    if (c == 0) {
      centers.push_back(0.5 * params.separation * axis);
    } else if (c == 1) {
      centers.push_back(-0.5 * params.separation * axis);
    } else {
      centers.push_back(0.5 * params.separation * unit_direction(eng, params.dim));
    }
  }

  std::vector<std::unique_ptr<Learner>> learners;
  learners.reserve(n_clients);
  for (int i = 0; i < n_clients; ++i) {
    Eigen::VectorXd o = centers[i % params.clusters];
    for (int d = 0; d < params.dim; ++d) o(d) += params.spread * rng::normal(eng);
    const Eigen::VectorXd w0 = o + params.init_offset * unit_direction(eng, params.dim);
    const int span = params.samples_max - params.samples_min + 1;
    const int samples = params.samples_min + uniform_int(eng, span);
    const auto noise_seed =
        rng::derive(env_seed, {static_cast<std::uint64_t>(rng::Stream::kLocalUpdate),
                               static_cast<std::uint64_t>(i)});
    learners.push_back(std::make_unique<SyntheticLearner>(
        w0, o, params.lr_local, params.noise_scale, params.sigma, samples, repr_dim, noise_seed));
  }
  return learners;
}

// --------------------------------------------------------------------------
// Dataset loading

namespace {

std::uint32_t read_u32_be(std::istream& in, const char* what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw StructuralError(std::string("idx: truncated header reading ") + what);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

Dataset finalize(Eigen::MatrixXd features, std::vector<int> labels) {
  Dataset d;
  d.features = std::move(features);
  d.labels = Eigen::VectorXi(static_cast<Eigen::Index>(labels.size()));
  int max_label = -1;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw StructuralError("dataset: negative class label");
    d.labels(static_cast<Eigen::Index>(i)) = labels[i];
    max_label = std::max(max_label, labels[i]);
  }
  d.n_classes = max_label + 1;
  if (d.size() == 0) throw StructuralError("dataset: empty");
  const double top = d.features.maxCoeff();
  if (top > 1.0) d.features /= top;
  return d;
}

}  // namespace

Dataset load_idx_streams(std::istream& images, std::istream& labels) {
  const auto label_magic = read_u32_be(labels, "label magic");
  if (label_magic != 0x00000801u)
    throw StructuralError("idx: bad label magic, expected 0x00000801");
  const auto n_labels = read_u32_be(labels, "label count");

  const auto image_magic = read_u32_be(images, "image magic");
  if (image_magic != 0x00000803u)
    throw StructuralError("idx: bad image magic, expected 0x00000803");
  const auto n_images = read_u32_be(images, "image count");
  const auto rows = read_u32_be(images, "rows");
  const auto cols = read_u32_be(images, "cols");
  if (n_labels != n_images) throw StructuralError("idx: image/label count mismatch");

  const std::size_t dim = static_cast<std::size_t>(rows) * cols;
  Eigen::MatrixXd features(n_images, dim);
  std::vector<unsigned char> buf(dim);
  for (std::uint32_t i = 0; i < n_images; ++i) {
    images.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(dim));
    if (!images) throw StructuralError("idx: truncated image data");
    for (std::size_t c = 0; c < dim; ++c)
      features(i, static_cast<Eigen::Index>(c)) = static_cast<double>(buf[c]);
  }
  std::vector<int> label_values(n_labels);
  for (std::uint32_t i = 0; i < n_labels; ++i) {
    char b = 0;
    labels.read(&b, 1);
    if (!labels) throw StructuralError("idx: truncated label data");
    label_values[i] = static_cast<int>(static_cast<unsigned char>(b));
  }
  return finalize(std::move(features), std::move(label_values));
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream images(images_path, std::ios::binary);
  if (!images) throw ConfigError("idx: cannot open " + images_path);
  std::ifstream labels(labels_path, std::ios::binary);
  if (!labels) throw ConfigError("idx: cannot open " + labels_path);
  return load_idx_streams(images, labels);
}

Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("csv: cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (row.size() < 2) throw StructuralError("csv: row needs a label and at least one feature");
    labels.push_back(static_cast<int>(row.front()));
    rows.push_back({row.begin() + 1, row.end()});
  }
  if (rows.empty()) throw StructuralError("csv: no data rows in " + path);
  const std::size_t dim = rows.front().size();
  Eigen::MatrixXd features(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != dim) throw StructuralError("csv: ragged feature row");
    for (std::size_t c = 0; c < dim; ++c)
      features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
  }
  return finalize(std::move(features), std::move(labels));
}

// --------------------------------------------------------------------------
// Dirichlet partition

DirichletPartition dirichlet_partition(const Eigen::VectorXi& labels, int n_clients, double alpha,
                                       rng::Engine& eng, int min_per_client) {
  if (n_clients < 2) throw ConfigError("dirichlet_partition: need at least 2 clients");
  if (alpha <= 0.0) throw ConfigError("dirichlet_partition: alpha must be positive");
  if (labels.size() == 0) throw StructuralError("dirichlet_partition: no samples");

  std::map<int, std::vector<int>> by_class;
  for (Eigen::Index i = 0; i < labels.size(); ++i)
    by_class[labels(i)].push_back(static_cast<int>(i));

  for (int attempt = 0; attempt < 100; ++attempt) {
    DirichletPartition part;
    part.alpha = alpha;
    part.client_index_sets.assign(n_clients, {});
    bool degenerate = false;
    for (auto& [cls, indices] : by_class) {
      std::vector<int> idx = indices;
      shuffle_vec(idx, eng);
      Eigen::VectorXd props(n_clients);
      for (int j = 0; j < n_clients; ++j) props(j) = rng::gamma(eng, alpha, 1.0);
      const double total = props.sum();
      if (total <= 0.0) {
        degenerate = true;
        break;
      }
      props /= total;
      const int n_c = static_cast<int>(idx.size());
      int start = 0;
      double cum = 0.0;
      for (int j = 0; j < n_clients; ++j) {
        cum += props(j);
        const int end = j + 1 == n_clients ? n_c : std::min(n_c, static_cast<int>(cum * n_c));
        for (int at = start; at < end; ++at) part.client_index_sets[j].push_back(idx[at]);
        start = std::max(start, end);
      }
    }
    if (degenerate) continue;
    bool ok = true;
    for (const auto& s : part.client_index_sets)
      if (static_cast<int>(s.size()) < min_per_client) ok = false;
    if (ok) {
      for (auto& s : part.client_index_sets) std::sort(s.begin(), s.end());
      return part;
    }
  }
  throw PartitionError(
      "dirichlet_partition: no draw gave every client at least " +
      std::to_string(min_per_client) +
      " samples after 100 attempts; increase alpha, add samples, or reduce client count");
}

nlohmann::json partition_to_json(const DirichletPartition& partition) {
  nlohmann::json j;
  j["alpha"] = partition.alpha;
  nlohmann::json clients;
  for (std::size_t i = 0; i < partition.client_index_sets.size(); ++i)
    clients[std::to_string(i)] = partition.client_index_sets[i];
  j["clients"] = std::move(clients);
  return j;
}

DirichletPartition partition_from_json(const nlohmann::json& j) {
  DirichletPartition part;
  part.alpha = j.at("alpha").get<double>();
  const auto& clients = j.at("clients");
  part.client_index_sets.resize(clients.size());
  for (auto it = clients.begin(); it != clients.end(); ++it) {
    const int id = std::stoi(it.key());
    if (id < 0 || id >= static_cast<int>(part.client_index_sets.size()))
      throw StructuralError("partition_from_json: client id out of range");
    part.client_index_sets[static_cast<std::size_t>(id)] = it.value().get<std::vector<int>>();
  }
  return part;
}

// --------------------------------------------------------------------------
// MLP learner

void MlpParams::validate() const {
  if (hidden < 1) throw ConfigError("mlp: hidden width must be positive");
  if (lr <= 0.0) throw ConfigError("mlp: learning rate must be positive");
  if (batch < 1) throw ConfigError("mlp: batch size must be positive");
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw ConfigError("mlp: test_fraction must lie in (0, 1)");
}

MlpLearner::MlpLearner(std::shared_ptr<const Dataset> data, std::vector<int> train_idx,
                       std::vector<int> test_idx, const MlpParams& params, int repr_dim,
                       std::uint64_t init_seed, std::uint64_t shuffle_seed)
    : data_(std::move(data)),
      train_idx_(std::move(train_idx)),
      test_idx_(std::move(test_idx)),
      lr_(params.lr),
      batch_(params.batch),
      repr_dim_(repr_dim),
      eng_(shuffle_seed) {
  params.validate();
  if (!data_) throw StructuralError("MlpLearner: null dataset");
  if (train_idx_.empty() || test_idx_.empty())
    throw StructuralError("MlpLearner: both data splits must be nonempty");
  rng::Engine init_eng(init_seed);
  net_ = net::make_net<double>({data_->dim(), params.hidden, data_->n_classes},
                               net::Head::kLinear, init_eng);
}

void MlpLearner::run_epoch() {
  shuffle_vec(train_idx_, eng_);
  const int n = static_cast<int>(train_idx_.size());
  for (int at = 0; at < n; at += batch_) {
    const int take = std::min(batch_, n - at);
    auto grads = net::zero_gradients(net_);
    net::TapeD tape;
    for (int b = 0; b < take; ++b) {
      const int row = train_idx_[static_cast<std::size_t>(at + b)];
      const Eigen::VectorXd x = data_->features.row(row).transpose();
      const Eigen::VectorXd logits = net::forward(net_, x, &tape);
      Eigen::VectorXd upstream = net::softmax(logits);
      upstream(data_->labels(row)) -= 1.0;
      net::accumulate(grads, net::backward(net_, tape, upstream));
    }
    net::sgd_step(net_, grads, lr_ / take);
  }
}

void MlpLearner::pretrain_isolated(int epochs) {
  for (int e = 0; e < epochs; ++e) run_epoch();
}

void MlpLearner::local_update() { run_epoch(); }

double MlpLearner::evaluate() const {
  int correct = 0;
  for (int row : test_idx_) {
    const Eigen::VectorXd logits = net::forward(net_, data_->features.row(row).transpose());
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    if (static_cast<int>(best) == data_->labels(row)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test_idx_.size());
}

void MlpLearner::set_parameters(const Eigen::VectorXd& params) {
  net::set_param_vector(net_, params);
}

Eigen::VectorXd MlpLearner::last_layer_repr() const {
  const auto& w = net_.weights.back();
  const Eigen::Map<const Eigen::VectorXd> flat(w.data(), w.size());
  return fit_length(flat, repr_dim_);
}

MlpPopulation make_mlp_population(const MlpParams& params, std::shared_ptr<const Dataset> data,
                                  int n_clients, double alpha, int repr_dim,
                                  std::uint64_t world_seed, std::uint64_t env_seed) {
  params.validate();
  if (!data) throw StructuralError("make_mlp_population: null dataset");
  if (data->n_classes < 2) throw StructuralError("make_mlp_population: need at least 2 classes");

  auto part_eng = rng::child(world_seed, {static_cast<std::uint64_t>(rng::Stream::kPartition)});
  MlpPopulation pop;
  pop.partition = dirichlet_partition(data->labels, n_clients, alpha, part_eng, 2);

  for (int i = 0; i < n_clients; ++i) {
    std::vector<int> idx = pop.partition.client_index_sets[static_cast<std::size_t>(i)];
    auto split_eng = rng::child(world_seed, {static_cast<std::uint64_t>(rng::Stream::kPartition),
                                             static_cast<std::uint64_t>(i)});
    shuffle_vec(idx, split_eng);
    const int n_i = static_cast<int>(idx.size());
    const int n_test = std::clamp(static_cast<int>(std::lround(params.test_fraction * n_i)), 1,
                                  n_i - 1);
    std::vector<int> test(idx.end() - n_test, idx.end());
    std::vector<int> train(idx.begin(), idx.end() - n_test);
    const auto init_seed =
        rng::derive(world_seed, {static_cast<std::uint64_t>(rng::Stream::kNetInit),
                                 static_cast<std::uint64_t>(i)});
    const auto shuffle_seed =
        rng::derive(env_seed, {static_cast<std::uint64_t>(rng::Stream::kLocalUpdate),
                               static_cast<std::uint64_t>(i)});
    pop.learners.push_back(std::make_unique<MlpLearner>(data, std::move(train), std::move(test),
                                                        params, repr_dim, init_seed,
                                                        shuffle_seed));
  }
  return pop;
}

// --------------------------------------------------------------------------
// Round dynamics

EnvStepResult env_step(const std::vector<std::vector<ClientId>>& winners_by_buyer,
                       const std::vector<ClientId>& authorized,
                       std::vector<std::unique_ptr<Learner>>& learners,
                       std::vector<PerfRecord>& records) {
  const int n = static_cast<int>(learners.size());
  if (static_cast<int>(winners_by_buyer.size()) != n)
    throw StructuralError("env_step: winner set count does not match client count");
  if (static_cast<int>(records.size()) != n)
    throw StructuralError("env_step: record count does not match client count");

  std::vector<bool> is_authorized(n, false);
  for (ClientId j : authorized) {
    if (j < 0 || j >= n) throw StructuralError("env_step: authorized id out of range");
    is_authorized[static_cast<std::size_t>(j)] = true;
  }

  std::vector<Eigen::VectorXd> snapshot(n);
  Eigen::VectorXd counts(n);
  for (int i = 0; i < n; ++i) {
    snapshot[i] = learners[static_cast<std::size_t>(i)]->parameters();
    counts(i) = learners[static_cast<std::size_t>(i)]->sample_count();
  }

  EnvStepResult result;
  result.perfs = Eigen::VectorXd::Zero(n);
  result.deltas = Eigen::VectorXd::Zero(n);
  for (int i = 0; i < n; ++i) {
    try {
      std::vector<ClientId> sellers = winners_by_buyer[static_cast<std::size_t>(i)];
      std::sort(sellers.begin(), sellers.end());
      for (ClientId j : sellers) {
        if (j == i) throw StructuralError("buyer appears in its own winner set");
        if (j < 0 || j >= n || !is_authorized[static_cast<std::size_t>(j)])
          throw StructuralError("winner set names an unauthorized seller");
      }
      auto& learner = *learners[static_cast<std::size_t>(i)];
      if (!sellers.empty()) {
        std::vector<Eigen::VectorXd> models;
        Eigen::VectorXd weights(sellers.size() + 1);
        for (std::size_t s = 0; s < sellers.size(); ++s) {
          models.push_back(snapshot[static_cast<std::size_t>(sellers[s])]);
          weights(static_cast<Eigen::Index>(s)) = counts(sellers[s]);
        }
        models.push_back(snapshot[static_cast<std::size_t>(i)]);
        weights(static_cast<Eigen::Index>(sellers.size())) = counts(i);
        learner.set_parameters(fedavg_aggregate(models, weights));
      }
      learner.local_update();
      const double perf = learner.evaluate();
      records[static_cast<std::size_t>(i)].record(perf);
      result.perfs(i) = perf;
      result.deltas(i) = records[static_cast<std::size_t>(i)].delta();
    } catch (const std::exception& e) {
      throw TrainingError("env_step: client " + std::to_string(i) + ": " + e.what());
    }
  }
  result.reprs = collect_reprs(learners);
  return result;
}

Eigen::VectorXd isolated_pretrain(std::vector<std::unique_ptr<Learner>>& learners, int epochs,
                                  std::vector<PerfRecord>& records) {
  if (epochs < 1) throw ConfigError("isolated_pretrain: epochs must be at least 1");
  const int n = static_cast<int>(learners.size());
  if (static_cast<int>(records.size()) != n)
    throw StructuralError("isolated_pretrain: record count does not match client count");
  Eigen::VectorXd baselines(n);
  for (int i = 0; i < n; ++i) {
    learners[static_cast<std::size_t>(i)]->pretrain_isolated(epochs);
    const double m0 = learners[static_cast<std::size_t>(i)]->evaluate();
    if (m0 <= 0.0)
      throw DomainError("isolated_pretrain: client " + std::to_string(i) +
                        " has zero baseline performance; increase pretraining epochs");
    records[static_cast<std::size_t>(i)].set_baseline(m0);
    baselines(i) = m0;
  }
  return baselines;
}

Eigen::MatrixXd collect_reprs(const std::vector<std::unique_ptr<Learner>>& learners) {
  if (learners.empty()) throw StructuralError("collect_reprs: no learners");
  const Eigen::VectorXd first = learners.front()->last_layer_repr();
  Eigen::MatrixXd reprs(static_cast<Eigen::Index>(learners.size()), first.size());
  reprs.row(0) = first.transpose();
  for (std::size_t i = 1; i < learners.size(); ++i) {
    const Eigen::VectorXd r = learners[i]->last_layer_repr();
    if (r.size() != first.size())
      throw StructuralError("collect_reprs: representation length mismatch at client " +
                            std::to_string(i));
    reprs.row(static_cast<Eigen::Index>(i)) = r.transpose();
  }
  return reprs;
}

}  // namespace flmkt
