#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "flmkt/fl_env.hpp"

using namespace flmkt;

TEST_CASE("fedavg worked examples") {
  Eigen::VectorXd a(1), b(1);
  a << 0.0;
  b << 3.0;
  Eigen::VectorXd counts(2);
  counts << 1.0, 2.0;
  CHECK(fedavg_aggregate({a, b}, counts)(0) == doctest::Approx(2.0).epsilon(1e-12));

  Eigen::VectorXd p(2), q(2);
  p << 0.0, 0.0;
  q << 2.0, 2.0;
  Eigen::VectorXd even(2);
  even << 1.0, 1.0;
  const Eigen::VectorXd mid = fedavg_aggregate({p, q}, even);
  CHECK(mid(0) == doctest::Approx(1.0));
  CHECK(mid(1) == doctest::Approx(1.0));

  // Identical models aggregate to themselves whatever the weights.
  Eigen::VectorXd w(3);
  w << 0.5, -1.0, 2.0;
  Eigen::VectorXd lopsided(3);
  lopsided << 10.0, 1.0, 4.0;
  CHECK((fedavg_aggregate({w, w, w}, lopsided) - w).lpNorm<Eigen::Infinity>() < 1e-15);
}

TEST_CASE("fedavg equals an independent weighted mean") {
  rng::Engine eng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 1 + static_cast<int>(rng::uniform01(eng) * 5);
    const int d = 1 + static_cast<int>(rng::uniform01(eng) * 6);
    std::vector<Eigen::VectorXd> models;
    Eigen::VectorXd counts(k);
    for (int i = 0; i < k; ++i) {
      Eigen::VectorXd m(d);
      for (int c = 0; c < d; ++c) m(c) = rng::normal(eng);
      models.push_back(m);
      counts(i) = 1.0 + std::floor(rng::uniform01(eng) * 100.0);
    }
    const Eigen::VectorXd got = fedavg_aggregate(models, counts);

    double total = 0.0;
    for (int i = 0; i < k; ++i) total += counts(i);
    for (int c = 0; c < d; ++c) {
      double acc = 0.0;
      for (int i = 0; i < k; ++i) acc += counts(i) * models[static_cast<std::size_t>(i)](c);
      CHECK(std::abs(got(c) - acc / total) < 1e-12);
    }
  }
}

TEST_CASE("fedavg is order-invariant") {
  rng::Engine eng(18);
  std::vector<Eigen::VectorXd> models;
  Eigen::VectorXd counts(4);
  for (int i = 0; i < 4; ++i) {
    Eigen::VectorXd m(5);
    for (int c = 0; c < 5; ++c) m(c) = rng::normal(eng);
    models.push_back(m);
    counts(i) = i + 1.0;
  }
  const Eigen::VectorXd fwd = fedavg_aggregate(models, counts);
  std::vector<Eigen::VectorXd> rev(models.rbegin(), models.rend());
  const Eigen::VectorXd bwd = fedavg_aggregate(rev, counts.reverse());
  CHECK((fwd - bwd).lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("fedavg input validation") {
  Eigen::VectorXd a(2), b(3);
  a.setZero();
  b.setZero();
  Eigen::VectorXd one(1), two(2);
  one << 1.0;
  two << 1.0, 1.0;
  CHECK_THROWS_AS(fedavg_aggregate({}, one), StructuralError);
  CHECK_THROWS_AS(fedavg_aggregate({a}, two), StructuralError);
  CHECK_THROWS_AS(fedavg_aggregate({a, b}, two), StructuralError);
  two << 1.0, 0.0;
  CHECK_THROWS_AS(fedavg_aggregate({a, a}, two), StructuralError);
}

TEST_CASE("synthetic learner: accuracy is the distance surrogate") {
  Eigen::VectorXd o(2);
  o << 1.0, -1.0;
  SyntheticLearner at_opt(o, o, 0.1, 0.0, 4.0, 10, 2, 1);
  CHECK(at_opt.evaluate() == doctest::Approx(1.0));

  Eigen::VectorXd w(2);
  w << 3.0, -1.0;  // distance 2
  SyntheticLearner away(w, o, 0.1, 0.0, 4.0, 10, 2, 1);
  CHECK(away.evaluate() == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
}

TEST_CASE("noiseless local updates contract toward the optimum") {
  Eigen::VectorXd o = Eigen::VectorXd::Zero(3);
  Eigen::VectorXd w(3);
  w << 4.0, 0.0, 3.0;
  SyntheticLearner learner(w, o, 0.2, 0.0, 4.0, 10, 3, 1);
  double prev = (learner.parameters() - o).norm();
  for (int t = 0; t < 5; ++t) {
    learner.local_update();
    const double now = (learner.parameters() - o).norm();
    CHECK(now == doctest::Approx(prev * 0.8).epsilon(1e-12));
    prev = now;
  }
}

TEST_CASE("buying a converged neighbor's model yields a positive delta") {
  Eigen::VectorXd o(2);
  o << 2.0, 0.0;
  Eigen::VectorXd far = o + Eigen::Vector2d(2.0, 0.0);
  std::vector<std::unique_ptr<Learner>> learners;
  learners.push_back(std::make_unique<SyntheticLearner>(far, o, 0.1, 0.0, 4.0, 10, 2, 1));
  learners.push_back(std::make_unique<SyntheticLearner>(o, o, 0.1, 0.0, 4.0, 10, 2, 2));

  std::vector<PerfRecord> records(2);
  records[0].set_baseline(learners[0]->evaluate());
  records[1].set_baseline(learners[1]->evaluate());

  const auto res = env_step({{1}, {}}, {1}, learners, records);
  CHECK(res.deltas(0) > 0.0);
  CHECK(records[0].delta() == res.deltas(0));
  // The averaged start (distance 1) beats the isolated one (distance 2).
  CHECK((learners[0]->parameters() - o).norm() == doctest::Approx(0.9).epsilon(1e-12));
}

TEST_CASE("sellers hand out pre-round snapshots even when they also buy") {
  Eigen::VectorXd oa(1), ob(1), wa(1), wb(1);
  oa << 0.0;
  ob << 10.0;
  wa << 2.0;
  wb << 8.0;
  std::vector<std::unique_ptr<Learner>> learners;
  learners.push_back(std::make_unique<SyntheticLearner>(wa, oa, 0.5, 0.0, 4.0, 10, 1, 1));
  learners.push_back(std::make_unique<SyntheticLearner>(wb, ob, 0.5, 0.0, 4.0, 10, 1, 2));
  std::vector<PerfRecord> records(2);
  records[0].set_baseline(learners[0]->evaluate());
  records[1].set_baseline(learners[1]->evaluate());

  // Both buy each other; both are authorized. Each must receive the other's
  // pre-round parameters, not the freshly aggregated ones.
  env_step({{1}, {0}}, {0, 1}, learners, records);
  // Client 0: mean(8, 2) = 5, then 5 - 0.5 * (5 - 0) = 2.5
  CHECK(learners[0]->parameters()(0) == doctest::Approx(2.5).epsilon(1e-12));
  // Client 1: mean(2, 8) = 5, then 5 - 0.5 * (5 - 10) = 7.5
  CHECK(learners[1]->parameters()(0) == doctest::Approx(7.5).epsilon(1e-12));
}

TEST_CASE("env_step rejects malformed winner sets by client") {
  std::vector<std::unique_ptr<Learner>> learners;
  Eigen::VectorXd z = Eigen::VectorXd::Zero(1);
  learners.push_back(std::make_unique<SyntheticLearner>(z, z, 0.1, 0.0, 4.0, 10, 1, 1));
  learners.push_back(std::make_unique<SyntheticLearner>(z, z, 0.1, 0.0, 4.0, 10, 1, 2));
  std::vector<PerfRecord> records(2);
  records[0].set_baseline(0.5);
  records[1].set_baseline(0.5);

  CHECK_THROWS_AS(env_step({{0}, {}}, {0, 1}, learners, records), TrainingError);
  CHECK_THROWS_AS(env_step({{1}, {}}, {0}, learners, records), TrainingError);
  CHECK_THROWS_AS(env_step({{5}, {}}, {0, 1}, learners, records), TrainingError);
  CHECK_THROWS_AS(env_step({{}}, {0, 1}, learners, records), StructuralError);
  try {
    env_step({{1}, {}}, {0}, learners, records);
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("client 0") != std::string::npos);
  }
}

TEST_CASE("synthetic population: deterministic world, seeded round noise") {
  SyntheticParams params;
  params.noise_scale = 0.0;
  auto pop1 = make_synthetic_population(params, 6, 8, 42, 1);
  auto pop2 = make_synthetic_population(params, 6, 8, 42, 99);
  auto pop3 = make_synthetic_population(params, 6, 8, 43, 1);
  // Same world seed: identical initial parameters, whatever the env seed.
  bool same_world = true, other_world = false;
  for (int i = 0; i < 6; ++i) {
    if (pop1[static_cast<std::size_t>(i)]->parameters() !=
        pop2[static_cast<std::size_t>(i)]->parameters())
      same_world = false;
    if (pop1[static_cast<std::size_t>(i)]->parameters() !=
        pop3[static_cast<std::size_t>(i)]->parameters())
      other_world = true;
  }
  CHECK(same_world);
  CHECK(other_world);
  for (int i = 0; i < 6; ++i) {
    const int s = pop1[static_cast<std::size_t>(i)]->sample_count();
    CHECK(s >= params.samples_min);
    CHECK(s <= params.samples_max);
  }
}

TEST_CASE("synthetic population: same-cluster optima are close, opposite far") {
  SyntheticParams params;
  params.spread = 0.2;
  params.separation = 8.0;
  auto pop = make_synthetic_population(params, 6, 8, 7, 1);
  auto opt = [&](int i) {
    return dynamic_cast<const SyntheticLearner&>(*pop[static_cast<std::size_t>(i)]).optimum();
  };
  // Even ids share cluster 0, odd ids cluster 1.
  CHECK((opt(0) - opt(2)).norm() < 2.0);
  CHECK((opt(1) - opt(3)).norm() < 2.0);
  CHECK((opt(0) - opt(1)).norm() > 6.0);
}

TEST_CASE("isolated_pretrain records baselines and rejects dead clients") {
  SyntheticParams params;
  params.noise_scale = 0.0;
  auto pop = make_synthetic_population(params, 4, 8, 11, 3);
  std::vector<PerfRecord> records(4);
  const Eigen::VectorXd baselines = isolated_pretrain(pop, 5, records);
  for (int i = 0; i < 4; ++i) {
    CHECK(baselines(i) > 0.0);
    CHECK(records[static_cast<std::size_t>(i)].m0 == baselines(i));
    CHECK(records[static_cast<std::size_t>(i)].gain() == 0.0);
  }

  // A client stranded far away underflows the accuracy surrogate to zero.
  std::vector<std::unique_ptr<Learner>> dead;
  Eigen::VectorXd o(1), w(1);
  o << 0.0;
  w << 200.0;
  dead.push_back(std::make_unique<SyntheticLearner>(w, o, 1e-9, 0.0, 0.1, 10, 1, 1));
  std::vector<PerfRecord> dead_records(1);
  CHECK_THROWS_AS(isolated_pretrain(dead, 1, dead_records), DomainError);
}

TEST_CASE("collect_reprs stacks per-client representations") {
  SyntheticParams params;
  auto pop = make_synthetic_population(params, 3, 5, 1, 1);
  const Eigen::MatrixXd reprs = collect_reprs(pop);
  CHECK(reprs.rows() == 3);
  CHECK(reprs.cols() == 5);
  CHECK(reprs.row(0).transpose() == pop[0]->last_layer_repr());
}

// ---------------------------------------------------------------------------
// Dataset plumbing

namespace {

void put_u32_be(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>((v >> 24) & 0xff));
  s.push_back(static_cast<char>((v >> 16) & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
  s.push_back(static_cast<char>(v & 0xff));
}

std::string idx_images(const std::vector<std::vector<unsigned char>>& imgs, int rows, int cols) {
  std::string s;
  put_u32_be(s, 0x00000803u);
  put_u32_be(s, static_cast<std::uint32_t>(imgs.size()));
  put_u32_be(s, static_cast<std::uint32_t>(rows));
  put_u32_be(s, static_cast<std::uint32_t>(cols));
  for (const auto& img : imgs)
    for (unsigned char px : img) s.push_back(static_cast<char>(px));
  return s;
}

std::string idx_labels(const std::vector<unsigned char>& labels) {
  std::string s;
  put_u32_be(s, 0x00000801u);
  put_u32_be(s, static_cast<std::uint32_t>(labels.size()));
  for (unsigned char l : labels) s.push_back(static_cast<char>(l));
  return s;
}

}  // namespace

TEST_CASE("idx loader: round trip, scaling, validation") {
  const std::vector<std::vector<unsigned char>> imgs = {{0, 128, 255, 64}, {10, 20, 30, 40}};
  std::istringstream images(idx_images(imgs, 2, 2));
  std::istringstream labels(idx_labels({3, 7}));
  const Dataset d = load_idx_streams(images, labels);
  CHECK(d.size() == 2);
  CHECK(d.dim() == 4);
  CHECK(d.n_classes == 8);
  CHECK(d.features(0, 2) == doctest::Approx(1.0));
  CHECK(d.features(0, 1) == doctest::Approx(128.0 / 255.0));
  CHECK(d.labels(1) == 7);

  std::istringstream good_labels(idx_labels({1}));
  std::istringstream lbl_as_img(idx_labels({1}));
  CHECK_THROWS_AS(load_idx_streams(lbl_as_img, good_labels), StructuralError);

  std::istringstream truncated(idx_images(imgs, 2, 2).substr(0, 14));
  std::istringstream lbl2(idx_labels({3, 7}));
  CHECK_THROWS_AS(load_idx_streams(truncated, lbl2), StructuralError);

  std::istringstream img3(idx_images(imgs, 2, 2));
  std::istringstream lbl_short(idx_labels({3}));
  CHECK_THROWS_AS(load_idx_streams(img3, lbl_short), StructuralError);
}

TEST_CASE("csv loader parses label-first rows and scales features") {
  const char* path = "test_fl_env_tmp.csv";
  {
    std::ofstream out(path);
    out << "0,0.0,4.0\n";
    out << "1,2.0,2.0\n";
    out << "2,1.0,0.0\n";
  }
  const Dataset d = load_csv(path);
  std::remove(path);
  CHECK(d.size() == 3);
  CHECK(d.dim() == 2);
  CHECK(d.n_classes == 3);
  CHECK(d.features.maxCoeff() == doctest::Approx(1.0));
  CHECK(d.features(1, 0) == doctest::Approx(0.5));
  CHECK(d.labels(2) == 2);
  CHECK_THROWS_AS(load_csv("no_such_file_anywhere.csv"), ConfigError);
}

TEST_CASE("dirichlet partition: disjoint cover with the floor honored") {
  std::vector<int> raw;
  for (int i = 0; i < 600; ++i) raw.push_back(i % 3);
  Eigen::VectorXi labels = Eigen::Map<Eigen::VectorXi>(raw.data(), 600);
  rng::Engine eng(5);
  const DirichletPartition part = dirichlet_partition(labels, 5, 0.5, eng, 2);
  REQUIRE(part.client_index_sets.size() == 5);
  std::set<int> seen;
  for (const auto& s : part.client_index_sets) {
    CHECK(static_cast<int>(s.size()) >= 2);
    CHECK(std::is_sorted(s.begin(), s.end()));
    for (int idx : s) {
      CHECK(seen.insert(idx).second);
      CHECK(idx >= 0);
      CHECK(idx < 600);
    }
  }
  CHECK(seen.size() == 600);
}

TEST_CASE("dirichlet alpha=100 is near-balanced per class") {
  std::vector<int> raw;
  for (int c = 0; c < 10; ++c)
    for (int i = 0; i < 500; ++i) raw.push_back(c);
  Eigen::VectorXi labels = Eigen::Map<Eigen::VectorXi>(raw.data(), 5000);
  rng::Engine eng(99);
  for (int draw = 0; draw < 20; ++draw) {
    const DirichletPartition part = dirichlet_partition(labels, 10, 100.0, eng, 1);
    Eigen::MatrixXi counts = Eigen::MatrixXi::Zero(10, 10);  // class x client
    for (int j = 0; j < 10; ++j)
      for (int idx : part.client_index_sets[static_cast<std::size_t>(j)])
        counts(labels(idx), j) += 1;
    for (int c = 0; c < 10; ++c) {
      const double lo = counts.row(c).minCoeff();
      const double hi = counts.row(c).maxCoeff();
      REQUIRE(lo > 0.0);
      CHECK(hi / lo < 2.0);
    }
  }
}

namespace {

double mean_label_entropy(const DirichletPartition& part, const Eigen::VectorXi& labels,
                          int n_classes) {
  double total = 0.0;
  for (const auto& s : part.client_index_sets) {
    Eigen::VectorXd hist = Eigen::VectorXd::Zero(n_classes);
    for (int idx : s) hist(labels(idx)) += 1.0;
    hist /= hist.sum();
    double h = 0.0;
    for (int c = 0; c < n_classes; ++c)
      if (hist(c) > 0.0) h -= hist(c) * std::log(hist(c));
    total += h;
  }
  return total / static_cast<double>(part.client_index_sets.size());
}

}  // namespace

TEST_CASE("small alpha concentrates classes on few clients") {
  std::vector<int> raw;
  for (int c = 0; c < 10; ++c)
    for (int i = 0; i < 300; ++i) raw.push_back(c);
  Eigen::VectorXi labels = Eigen::Map<Eigen::VectorXi>(raw.data(), 3000);
  rng::Engine skew_eng(7), bal_eng(7);
  double skewed = 0.0, balanced = 0.0;
  for (int draw = 0; draw < 10; ++draw) {
    skewed += mean_label_entropy(dirichlet_partition(labels, 10, 0.1, skew_eng, 1), labels, 10);
    balanced += mean_label_entropy(dirichlet_partition(labels, 10, 100.0, bal_eng, 1), labels, 10);
  }
  CHECK(skewed < 0.6 * balanced);
}

TEST_CASE("partition fails loudly when the floor cannot be met") {
  Eigen::VectorXi labels(4);
  labels << 0, 0, 1, 1;
  rng::Engine eng(3);
  CHECK_THROWS_AS(dirichlet_partition(labels, 8, 1.0, eng, 1), PartitionError);
  CHECK_THROWS_AS(dirichlet_partition(labels, 2, 0.0, eng, 1), ConfigError);
}

TEST_CASE("partition manifest round trip") {
  std::vector<int> raw;
  for (int i = 0; i < 100; ++i) raw.push_back(i % 2);
  Eigen::VectorXi labels = Eigen::Map<Eigen::VectorXi>(raw.data(), 100);
  rng::Engine eng(23);
  const DirichletPartition part = dirichlet_partition(labels, 4, 1.0, eng, 1);
  const nlohmann::json j = partition_to_json(part);
  CHECK(j.contains("alpha"));
  CHECK(j.contains("clients"));
  const DirichletPartition back = partition_from_json(j);
  CHECK(back.alpha == part.alpha);
  CHECK(back.client_index_sets == part.client_index_sets);
}

// ---------------------------------------------------------------------------
// MLP learner

namespace {

std::shared_ptr<Dataset> random_labeled_dataset(int n, int dim, int n_classes,
                                                std::uint64_t seed) {
  auto d = std::make_shared<Dataset>();
  d->features.resize(n, dim);
  d->labels.resize(n);
  rng::Engine eng(seed);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < dim; ++c) d->features(i, c) = rng::uniform01(eng);
    d->labels(i) = i % n_classes;
  }
  d->n_classes = n_classes;
  return d;
}

}  // namespace

TEST_CASE("untrained MLP sits at chance on label-independent features") {
  auto data = random_labeled_dataset(600, 16, 10, 2029);
  std::vector<int> train, test;
  for (int i = 0; i < 100; ++i) train.push_back(i);
  for (int i = 100; i < 600; ++i) test.push_back(i);
  MlpParams params;
  params.hidden = 32;
  double acc = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    MlpLearner learner(data, train, test, params, 8, seed, seed + 50);
    acc += learner.evaluate();
  }
  acc /= 10.0;
  CHECK(std::abs(acc - 0.1) < 0.05);
}

TEST_CASE("MLP learns a separable problem") {
  // Two classes split by the first feature.
  auto d = std::make_shared<Dataset>();
  const int n = 160;
  d->features.resize(n, 4);
  d->labels.resize(n);
  d->n_classes = 2;
  rng::Engine eng(8);
  for (int i = 0; i < n; ++i) {
    const int y = i % 2;
    d->labels(i) = y;
    d->features(i, 0) = y == 0 ? rng::uniform01(eng) * 0.4 : 0.6 + rng::uniform01(eng) * 0.4;
    for (int c = 1; c < 4; ++c) d->features(i, c) = rng::uniform01(eng);
  }
  std::vector<int> train, test;
  for (int i = 0; i < 120; ++i) train.push_back(i);
  for (int i = 120; i < n; ++i) test.push_back(i);
  MlpParams params;
  params.hidden = 16;
  params.lr = 0.2;
  MlpLearner learner(d, train, test, params, 8, 3, 4);
  learner.pretrain_isolated(40);
  CHECK(learner.evaluate() > 0.9);
}

TEST_CASE("MLP parameter round trip and representation length") {
  auto data = random_labeled_dataset(60, 6, 3, 5);
  std::vector<int> train{0, 1, 2, 3, 4, 5, 6, 7}, test{8, 9};
  MlpParams params;
  params.hidden = 8;
  MlpLearner learner(data, train, test, params, 12, 1, 2);
  const Eigen::VectorXd theta = learner.parameters();
  MlpLearner other(data, train, test, params, 12, 9, 2);
  other.set_parameters(theta);
  CHECK(other.parameters() == theta);
  CHECK(learner.last_layer_repr().size() == 12);
  CHECK(learner.sample_count() == 8);
}

TEST_CASE("mlp population: disjoint client data, deterministic init") {
  auto data = random_labeled_dataset(400, 8, 4, 77);
  MlpParams params;
  params.hidden = 8;
  auto pop1 = make_mlp_population(params, data, 4, 10.0, 8, 31, 1);
  auto pop2 = make_mlp_population(params, data, 4, 10.0, 8, 31, 2);
  REQUIRE(pop1.learners.size() == 4);
  CHECK(pop1.partition.client_index_sets == pop2.partition.client_index_sets);
  for (int i = 0; i < 4; ++i) {
    CHECK(pop1.learners[static_cast<std::size_t>(i)]->parameters() ==
          pop2.learners[static_cast<std::size_t>(i)]->parameters());
    CHECK(pop1.learners[static_cast<std::size_t>(i)]->sample_count() >= 1);
  }
  int covered = 0;
  for (const auto& s : pop1.partition.client_index_sets) covered += static_cast<int>(s.size());
  CHECK(covered == 400);
}
