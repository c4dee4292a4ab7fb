#include "osaka/batch.hpp"

#include "osaka/errors.hpp"

namespace osaka {

Batch select_rows(const Batch& b, const std::vector<int>& rows) {
  Batch out;
  out.x.resize(static_cast<Eigen::Index>(rows.size()), b.x.cols());
  if (!b.labels.empty()) out.labels.reserve(rows.size());
  if (b.targets.size() > 0) out.targets.resize(static_cast<Eigen::Index>(rows.size()), b.targets.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(rows[i]);
    if (r < 0 || r >= b.x.rows()) throw IndexError("select_rows: row " + std::to_string(r) + " out of range");
    const auto o = static_cast<Eigen::Index>(i);
    out.x.row(o) = b.x.row(r);
    if (!b.labels.empty()) out.labels.push_back(b.labels[static_cast<std::size_t>(r)]);
    if (b.targets.size() > 0) out.targets.row(o) = b.targets.row(r);
  }
  return out;
}

Batch concat(const std::vector<Batch>& parts) {
  Batch out;
  if (parts.empty()) return out;
  Eigen::Index rows = 0;
  for (const Batch& p : parts) rows += p.x.rows();
  const bool with_targets = parts.front().targets.size() > 0;
  out.x.resize(rows, parts.front().x.cols());
  if (with_targets) out.targets.resize(rows, parts.front().targets.cols());
  Eigen::Index r = 0;
  for (const Batch& p : parts) {
    if (p.x.cols() != out.x.cols()) throw DimensionError("concat: feature counts differ");
    out.x.middleRows(r, p.x.rows()) = p.x;
    if (with_targets) out.targets.middleRows(r, p.x.rows()) = p.targets;
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    r += p.x.rows();
  }
  return out;
}

}  // namespace osaka
