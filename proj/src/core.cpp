#include "flmkt/core.hpp"

#include <ostream>

namespace flmkt {

namespace {

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows > 0 ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j.at(i);
    if (static_cast<Eigen::Index>(row.size()) != cols)
      throw StructuralError("ledger_from_json: ragged matrix");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row.at(c).get<double>();
  }
  return m;
}

nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
  nlohmann::json arr = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = j.at(i).get<double>();
  return v;
}

}  // namespace

Eigen::VectorXd settle_round(RoundLedger& ledger, const Eigen::VectorXd& deltas) {
  const int n = ledger.n_clients();
  if (deltas.size() != n) throw StructuralError("settle_round: delta vector size mismatch");
  ledger.transfers.setZero();
  for (int i = 0; i < n; ++i) {
    const double paid_gain = std::max(deltas(i), 0.0);
    for (int j = 0; j < n; ++j) {
      if (ledger.winners(i, j)) ledger.transfers(i, j) = ledger.unit_prices(i, j) * paid_gain;
    }
  }
  return ledger.transfers.colwise().sum().transpose();
}

nlohmann::json ledger_to_json(const RoundLedger& ledger, const Eigen::VectorXd& deltas,
                              const Eigen::VectorXd& revenues) {
  nlohmann::json j;
  j["round"] = ledger.round;
  j["bids"] = matrix_to_json(ledger.bids);
  j["scores"] = matrix_to_json(ledger.scores);
  nlohmann::json win = nlohmann::json::array();
  for (Eigen::Index i = 0; i < ledger.winners.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < ledger.winners.cols(); ++c)
      row.push_back(ledger.winners(i, c) ? 1 : 0);
    win.push_back(std::move(row));
  }
  j["winners"] = std::move(win);
  j["unit_prices"] = matrix_to_json(ledger.unit_prices);
  j["transfers"] = matrix_to_json(ledger.transfers);
  j["deltas"] = vector_to_json(deltas);
  j["revenues"] = vector_to_json(revenues);
  return j;
}

RoundLedger ledger_from_json(const nlohmann::json& j, Eigen::VectorXd* deltas,
                             Eigen::VectorXd* revenues) {
  Eigen::MatrixXd bids = matrix_from_json(j.at("bids"));
  RoundLedger ledger(static_cast<int>(bids.rows()), j.at("round").get<int>());
  ledger.bids = std::move(bids);
  ledger.scores = matrix_from_json(j.at("scores"));
  ledger.unit_prices = matrix_from_json(j.at("unit_prices"));
  ledger.transfers = matrix_from_json(j.at("transfers"));
  const auto& win = j.at("winners");
  for (Eigen::Index i = 0; i < ledger.winners.rows(); ++i)
    for (Eigen::Index c = 0; c < ledger.winners.cols(); ++c)
      ledger.winners(i, c) = win.at(i).at(c).get<int>() != 0;
  if (deltas) *deltas = vector_from_json(j.at("deltas"));
  if (revenues) *revenues = vector_from_json(j.at("revenues"));
  return ledger;
}

void append_ledger_line(std::ostream& os, const RoundLedger& ledger, const Eigen::VectorXd& deltas,
                        const Eigen::VectorXd& revenues) {
  os << ledger_to_json(ledger, deltas, revenues).dump() << '\n';
}

}  // namespace flmkt
