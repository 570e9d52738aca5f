#include <fstream>
#include <set>
#include <string>

#include "flmkt/errors.hpp"
#include "flmkt/sim_engine.hpp"

namespace flmkt {

namespace {

void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                         const std::string& scope) {
  if (!j.is_object()) throw ConfigError("config: " + scope + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key()))
      throw ConfigError("config: unknown key '" + it.key() + "' in " + scope);
  }
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

std::string utility_name(UtilityDistribution u) {
  return u == UtilityDistribution::kUniform01 ? "uniform01" : "abs_normal01";
}

UtilityDistribution utility_from(const std::string& s) {
  if (s == "uniform01") return UtilityDistribution::kUniform01;
  if (s == "abs_normal01") return UtilityDistribution::kAbsNormal01;
  throw ConfigError("config: unknown utility_distribution '" + s + "'");
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kStochastic: return "stochastic";
    case Strategy::kGreedy: return "greedy";
    case Strategy::kEpsGreedy: return "eps_greedy";
  }
  throw StructuralError("config: bad strategy value");
}

Strategy strategy_from(const std::string& s) {
  if (s == "stochastic") return Strategy::kStochastic;
  if (s == "greedy") return Strategy::kGreedy;
  if (s == "eps_greedy") return Strategy::kEpsGreedy;
  throw ConfigError("config: unknown strategy '" + s + "'");
}

std::string allocator_name(AllocatorKind a) {
  switch (a) {
    case AllocatorKind::kRl: return "rl";
    case AllocatorKind::kGsp: return "gsp";
    case AllocatorKind::kRandom: return "random";
  }
  throw StructuralError("config: bad allocator value");
}

AllocatorKind allocator_from(const std::string& s) {
  if (s == "rl") return AllocatorKind::kRl;
  if (s == "gsp") return AllocatorKind::kGsp;
  if (s == "random") return AllocatorKind::kRandom;
  throw ConfigError("config: unknown allocator '" + s + "'");
}

std::string learner_name(LearnerKind l) {
  return l == LearnerKind::kSynthetic ? "synthetic" : "real_mlp";
}

LearnerKind learner_from(const std::string& s) {
  if (s == "synthetic") return LearnerKind::kSynthetic;
  if (s == "real_mlp") return LearnerKind::kRealMlp;
  throw ConfigError("config: unknown learner '" + s + "'");
}

}  // namespace

void SimConfig::validate() const {
  if (n_clients < 2) throw ConfigError("config: n_clients must be at least 2");
  if (copies_k < 1) throw ConfigError("config: copies_k must be at least 1");
  if (copies_k >= n_clients)
    throw ConfigError("config: copies_k must satisfy k < n_clients; unlimited copies let any "
                      "bid win and remove the incentive to bid truthfully");
  if (!(seller_ratio > 0.0 && seller_ratio < 1.0))
    throw ConfigError("config: seller_ratio must lie in (0, 1); random seller authorization "
                      "needs m < n_clients to keep bids truthful");
  MechanismParams mech{n_clients, copies_k, seller_ratio, 0};
  mech.validate();
  if (train_rounds < 0) throw ConfigError("config: train_rounds must be non-negative");
  if (test_rounds < 1) throw ConfigError("config: test_rounds must be at least 1");
  if (eta < 0.0) throw ConfigError("config: eta must be non-negative");
  if (alpha < 0.0 || beta < 0.0) throw ConfigError("config: learning rates must be non-negative");
  if (!(exploration_fraction >= 0.0 && exploration_fraction <= 1.0))
    throw ConfigError("config: exploration_fraction must lie in [0, 1]");
  if (!(epsilon >= 0.0 && epsilon <= 1.0))
    throw ConfigError("config: epsilon must lie in [0, 1]");
  if (seeds.train == seeds.eval || seeds.train == seeds.test || seeds.eval == seeds.test)
    throw ConfigError("config: train, eval and test seeds must be distinct");
  if (repr_dim < 1) throw ConfigError("config: repr_dim must be positive");
  if (pretrain_epochs < 1) throw ConfigError("config: pretrain_epochs must be at least 1");
  if (dirichlet_alpha <= 0.0) throw ConfigError("config: dirichlet_alpha must be positive");
  synthetic.validate();
  mlp.validate();
  if (learner == LearnerKind::kRealMlp) {
    const bool has_csv = !dataset.csv.empty();
    const bool has_idx = !dataset.images.empty() && !dataset.labels.empty();
    if (!has_csv && !has_idx)
      throw ConfigError("config: real_mlp learner needs dataset.csv or dataset.images+labels");
  }
}

nlohmann::json SimConfig::to_json() const {
  nlohmann::json j;
  j["n_clients"] = n_clients;
  j["train_rounds"] = train_rounds;
  j["test_rounds"] = test_rounds;
  j["copies_k"] = copies_k;
  j["seller_ratio"] = seller_ratio;
  j["eta"] = eta;
  j["utility_distribution"] = utility_name(utility_distribution);
  j["strategy"] = strategy_name(strategy);
  j["allocator"] = allocator_name(allocator);
  j["learner"] = learner_name(learner);
  j["alpha"] = alpha;
  j["beta"] = beta;
  j["exploration_fraction"] = exploration_fraction;
  j["epsilon"] = epsilon;
  j["seeds"] = {{"train", seeds.train}, {"eval", seeds.eval}, {"test", seeds.test}};
  j["repr_dim"] = repr_dim;
  j["pretrain_epochs"] = pretrain_epochs;
  j["dirichlet_alpha"] = dirichlet_alpha;
  j["dataset"] = {{"csv", dataset.csv}, {"images", dataset.images}, {"labels", dataset.labels}};
  j["synthetic"] = {{"dim", synthetic.dim},
                    {"lr_local", synthetic.lr_local},
                    {"noise_scale", synthetic.noise_scale},
                    {"sigma", synthetic.sigma},
                    {"clusters", synthetic.clusters},
                    {"separation", synthetic.separation},
                    {"spread", synthetic.spread},
                    {"init_offset", synthetic.init_offset},
                    {"samples_min", synthetic.samples_min},
                    {"samples_max", synthetic.samples_max}};
  j["mlp"] = {{"hidden", mlp.hidden},
              {"lr", mlp.lr},
              {"batch", mlp.batch},
              {"test_fraction", mlp.test_fraction}};
  return j;
}

SimConfig SimConfig::from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"n_clients", "train_rounds", "test_rounds", "copies_k", "seller_ratio",
                       "eta", "utility_distribution", "strategy", "allocator", "learner", "alpha",
                       "beta", "exploration_fraction", "epsilon", "seeds", "repr_dim",
                       "pretrain_epochs", "dirichlet_alpha", "dataset", "synthetic", "mlp"},
                      "top level");
  SimConfig c;
  try {
    read_if(j, "n_clients", c.n_clients);
    read_if(j, "train_rounds", c.train_rounds);
    read_if(j, "test_rounds", c.test_rounds);
    read_if(j, "copies_k", c.copies_k);
    read_if(j, "seller_ratio", c.seller_ratio);
    read_if(j, "eta", c.eta);
    if (j.contains("utility_distribution"))
      c.utility_distribution = utility_from(j.at("utility_distribution").get<std::string>());
    if (j.contains("strategy")) c.strategy = strategy_from(j.at("strategy").get<std::string>());
    if (j.contains("allocator"))
      c.allocator = allocator_from(j.at("allocator").get<std::string>());
    if (j.contains("learner")) c.learner = learner_from(j.at("learner").get<std::string>());
    read_if(j, "alpha", c.alpha);
    read_if(j, "beta", c.beta);
    read_if(j, "exploration_fraction", c.exploration_fraction);
    read_if(j, "epsilon", c.epsilon);
    if (j.contains("seeds")) {
      const auto& s = j.at("seeds");
      reject_unknown_keys(s, {"train", "eval", "test"}, "seeds");
      read_if(s, "train", c.seeds.train);
      read_if(s, "eval", c.seeds.eval);
      read_if(s, "test", c.seeds.test);
    }
    read_if(j, "repr_dim", c.repr_dim);
    read_if(j, "pretrain_epochs", c.pretrain_epochs);
    read_if(j, "dirichlet_alpha", c.dirichlet_alpha);
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      reject_unknown_keys(d, {"csv", "images", "labels"}, "dataset");
      read_if(d, "csv", c.dataset.csv);
      read_if(d, "images", c.dataset.images);
      read_if(d, "labels", c.dataset.labels);
    }
    if (j.contains("synthetic")) {
      const auto& s = j.at("synthetic");
      reject_unknown_keys(s,
                          {"dim", "lr_local", "noise_scale", "sigma", "clusters", "separation",
                           "spread", "init_offset", "samples_min", "samples_max"},
                          "synthetic");
      read_if(s, "dim", c.synthetic.dim);
      read_if(s, "lr_local", c.synthetic.lr_local);
      read_if(s, "noise_scale", c.synthetic.noise_scale);
      read_if(s, "sigma", c.synthetic.sigma);
      read_if(s, "clusters", c.synthetic.clusters);
      read_if(s, "separation", c.synthetic.separation);
      read_if(s, "spread", c.synthetic.spread);
      read_if(s, "init_offset", c.synthetic.init_offset);
      read_if(s, "samples_min", c.synthetic.samples_min);
      read_if(s, "samples_max", c.synthetic.samples_max);
    }
    if (j.contains("mlp")) {
      const auto& m = j.at("mlp");
      reject_unknown_keys(m, {"hidden", "lr", "batch", "test_fraction"}, "mlp");
      read_if(m, "hidden", c.mlp.hidden);
      read_if(m, "lr", c.mlp.lr);
      read_if(m, "batch", c.mlp.batch);
      read_if(m, "test_fraction", c.mlp.test_fraction);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: malformed value: ") + e.what());
  }
  c.validate();
  return c;
}

SimConfig SimConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

}  // namespace flmkt
