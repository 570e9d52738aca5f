#pragma once

#include <Eigen/Core>
#include <iosfwd>
#include <vector>

#include "flmkt/errors.hpp"
#include "json.hpp"

namespace flmkt {

using ClientId = int;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

// Relative improvement of performance mt over the isolated baseline m0.
inline double performance_gain(double m0, double mt) {
  if (m0 <= 0.0) throw DomainError("performance_gain: zero baseline performance");
  return (mt - m0) / m0;
}

inline double delta_gain(double g_prev, double g_now) { return g_now - g_prev; }

// Per-client performance track. Index 0 is the pretraining baseline
// (history[0] = m0, gains[0] = 0); entry t covers market round t.
struct PerfRecord {
  double m0 = 0.0;
  std::vector<double> history;
  std::vector<double> gains;
  std::vector<double> deltas;

  void set_baseline(double baseline) {
    if (baseline <= 0.0) throw DomainError("PerfRecord: zero baseline performance");
    m0 = baseline;
    history.assign(1, baseline);
    gains.assign(1, 0.0);
    deltas.assign(1, 0.0);
  }

  // Appends the post-round performance and the derived gain/delta.
  void record(double mt) {
    if (history.empty()) throw StructuralError("PerfRecord: baseline not set");
    const double g = performance_gain(m0, mt);
    deltas.push_back(delta_gain(gains.back(), g));
    gains.push_back(g);
    history.push_back(mt);
  }

  double performance() const { return history.back(); }
  double gain() const { return gains.back(); }
  double delta() const { return deltas.back(); }
};

// One auction round as the broker recorded it. Entry (i, j) always reads
// "buyer i versus seller j". Rows/columns of clients that sit a round out
// stay zero.
struct RoundLedger {
  int round = 0;
  Eigen::MatrixXd bids;         // currency per unit gain
  Eigen::MatrixXd scores;       // allocation scores
  BoolMatrix winners;           // winners(i, j): buyer i won seller j
  Eigen::MatrixXd unit_prices;  // currency per unit gain
  Eigen::MatrixXd transfers;    // money actually moved
  std::vector<ClientId> authorized_sellers;

  explicit RoundLedger(int n_clients = 0, int round_index = 0)
      : round(round_index),
        bids(Eigen::MatrixXd::Zero(n_clients, n_clients)),
        scores(Eigen::MatrixXd::Zero(n_clients, n_clients)),
        winners(BoolMatrix::Constant(n_clients, n_clients, false)),
        unit_prices(Eigen::MatrixXd::Zero(n_clients, n_clients)),
        transfers(Eigen::MatrixXd::Zero(n_clients, n_clients)) {}

  int n_clients() const { return static_cast<int>(bids.rows()); }
};

// Seller-side earnings over the whole run.
struct RevenueAccount {
  std::vector<double> per_round;
  double cumulative = 0.0;

  void credit(double revenue) {
    if (revenue < 0.0) throw StructuralError("RevenueAccount: negative round revenue");
    per_round.push_back(revenue);
    cumulative += revenue;
  }
};

// Computes the monetary transfers of a finalized round and returns per-seller
// revenues. transfers(i, j) = unit_prices(i, j) * max(delta_i, 0) on winning
// cells; a buyer with no round-over-round gain pays nothing.
Eigen::VectorXd settle_round(RoundLedger& ledger, const Eigen::VectorXd& deltas);

// JSON-lines serialization, one record per round. Field names are part of
// the on-disk contract: round, bids, scores, winners, unit_prices,
// transfers, deltas, revenues.
nlohmann::json ledger_to_json(const RoundLedger& ledger, const Eigen::VectorXd& deltas,
                              const Eigen::VectorXd& revenues);
RoundLedger ledger_from_json(const nlohmann::json& j, Eigen::VectorXd* deltas = nullptr,
                             Eigen::VectorXd* revenues = nullptr);
void append_ledger_line(std::ostream& os, const RoundLedger& ledger, const Eigen::VectorXd& deltas,
                        const Eigen::VectorXd& revenues);

}  // namespace flmkt
