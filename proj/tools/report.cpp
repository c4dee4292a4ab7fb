#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <regex>
#include <set>
#include <sstream>

#include "experiment.hpp"
#include "io.hpp"
#include "osaka/errors.hpp"

namespace osaka::cli {

namespace fs = std::filesystem;

namespace {

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string num(double v, int digits = 1) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

Stat single(double v) { return Stat{v, 0.0, 0.0, 1}; }

}  // namespace

std::vector<double> smooth(const std::vector<double>& values, int window) {
  if (window < 1) throw ConfigError("--smooth must be >= 1");
  std::vector<double> out(values.size());
  double sum = 0.0;
  for (std::size_t t = 0; t < values.size(); ++t) {
    sum += values[t];
    if (t >= static_cast<std::size_t>(window)) sum -= values[t - static_cast<std::size_t>(window)];
    const std::size_t n = std::min<std::size_t>(t + 1, static_cast<std::size_t>(window));
    out[t] = window == 1 ? values[t] : sum / static_cast<double>(n);
  }
  return out;
}

const std::vector<std::string>& table_columns() {
  static const std::vector<std::string> cols{"total", "pretrain", "ood_inputs", "ood_targets",
                                             "precision", "recall", "f1"};
  return cols;
}

bool is_bold(const std::vector<MethodStats>& methods, std::size_t index, const std::string& column) {
  const auto it = methods[index].stats.find(column);
  if (it == methods[index].stats.end()) return false;
  const Stat& mine = it->second;
  for (std::size_t j = 0; j < methods.size(); ++j) {
    if (j == index) continue;
    const auto other = methods[j].stats.find(column);
    if (other == methods[j].stats.end()) continue;
    // higher is better for every column; the interval must sit above the other mean
    if (!(mine.mean - mine.ci95 > other->second.mean)) return false;
  }
  return true;
}

std::vector<MethodStats> collect(const std::string& dir) {
  if (!fs::is_directory(dir)) throw ReportError("'" + dir + "' is not a directory");
  int window = 0;
  if (fs::exists(fs::path(dir) / "config.json")) {
    try {
      window = nlohmann::json::parse(read_file(fs::path(dir) / "config.json")).value("boundary_window", 0);
    } catch (const nlohmann::json::exception& e) {
      throw ReportError(dir + "/config.json: " + e.what());
    }
  }
  std::vector<fs::path> subdirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) subdirs.push_back(e.path());
  std::sort(subdirs.begin(), subdirs.end());

  const std::regex trace_name(R"(seed_(\d+)\.csv)");
  std::vector<MethodStats> out;
  for (const fs::path& sub : subdirs) {
    std::vector<std::pair<std::uint64_t, fs::path>> files;
    for (const auto& e : fs::directory_iterator(sub)) {
      std::smatch m;
      const std::string name = e.path().filename().string();
      if (e.is_regular_file() && std::regex_match(name, m, trace_name))
        files.emplace_back(std::stoull(m[1].str()), e.path());
    }
    if (files.empty()) continue;
    std::sort(files.begin(), files.end());

    MethodStats ms;
    ms.name = sub.filename().string();
    if (fs::exists(sub / "summary.json")) {
      try {
        const auto s = nlohmann::json::parse(read_file(sub / "summary.json"));
        if (s.contains("learner") && s["learner"].contains("gamma")) {
          const auto& g = s["learner"]["gamma"];
          if (g.is_number()) ms.gamma = g.get<double>();
          else ms.gamma = g.get<std::string>() == "-inf" ? -INFINITY : INFINITY;
        }
        if (s.contains("learner") && s["learner"].value("kind", "").rfind("cmaml", 0) != 0) ms.gamma.reset();
      } catch (const nlohmann::json::exception& e) {
        throw ReportError((sub / "summary.json").string() + ": " + e.what());
      }
    }
    std::vector<double> counts;
    bool detects = false;
    for (const auto& [seed, path] : files) {
      const EpisodeTrace tr = parse_trace_csv(read_file(path), path.string());
      if (tr.rows.empty()) continue;
      ms.runs.push_back(summarize(tr, seed, "", window));
      if (ms.curve.size() < tr.rows.size()) {
        ms.curve.resize(tr.rows.size(), 0.0);
        counts.resize(tr.rows.size(), 0.0);
      }
      for (std::size_t t = 0; t < tr.rows.size(); ++t) {
        ms.curve[t] += tr.rows[t].acc;
        counts[t] += 1.0;
        detects = detects || tr.rows[t].detected_boundary;
      }
    }
    for (std::size_t t = 0; t < ms.curve.size(); ++t) ms.curve[t] /= counts[t];
    if (ms.runs.empty()) continue;
    if (ms.runs.size() >= 2) {
      ms.stats = aggregate(ms.runs);
    } else {
      const RunSummary& r = ms.runs[0];
      ms.stats["total"] = single(r.total);
      for (const auto& [f, a] : r.family_acc) ms.stats[to_string(f)] = single(a);
      ms.stats["precision"] = single(r.boundaries.precision);
      ms.stats["recall"] = single(r.boundaries.recall);
      ms.stats["f1"] = single(r.boundaries.f1);
    }
    if (!detects) {
      ms.stats.erase("precision");
      ms.stats.erase("recall");
      ms.stats.erase("f1");
    }
    out.push_back(std::move(ms));
  }
  if (out.empty()) throw ReportError("no trace files (<learner>/seed_<n>.csv) under '" + dir + "'");
  return out;
}

std::string format_table(const std::vector<MethodStats>& methods) {
  static const std::vector<std::string> heads{"Total", "Pretrain", "OoD inputs", "OoD targets",
                                              "Precision", "Recall", "F1"};
  std::ostringstream s;
  s << "| Method | Seeds |";
  for (const auto& h : heads) s << ' ' << h << " |";
  s << "\n|---|---|";
  for (std::size_t i = 0; i < heads.size(); ++i) s << "---|";
  s << '\n';
  for (std::size_t i = 0; i < methods.size(); ++i) {
    s << "| " << methods[i].name << " | " << methods[i].runs.size() << " |";
    for (const auto& col : table_columns()) {
      const auto it = methods[i].stats.find(col);
      if (it == methods[i].stats.end()) {
        s << " - |";
        continue;
      }
      std::string cell = num(100.0 * it->second.mean) + " ± " + num(100.0 * it->second.std);
      if (is_bold(methods, i, col)) cell = "**" + cell + "**";
      s << ' ' << cell << " |";
    }
    s << '\n';
  }
  s << "\nValues are mean ± std (percent) over seeds. Bold: the 95% interval (1.96 std / sqrt(n)) lies above every "
       "other method's mean.\n";
  return s.str();
}

std::string curves_svg(const std::vector<MethodStats>& methods, int window) {
  const double w = 900, h = 420, left = 60, right = 180, top = 20, bottom = 50;
  const double pw = w - left - right, ph = h - top - bottom;
  std::size_t steps = 1;
  for (const auto& m : methods) steps = std::max(steps, m.curve.size());
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double y = top + ph * (1.0 - k / 4.0);
    s << "<text x=\"" << left - 8 << "\" y=\"" << y + 4 << "\" font-size=\"11\" text-anchor=\"end\">"
      << num(k / 4.0, 2) << "</text>\n";
  }
  s << "<text x=\"" << left + pw / 2 << "\" y=\"" << h - 12 << "\" font-size=\"12\" text-anchor=\"middle\">step ("
    << steps << " total, window " << window << ")</text>\n"
    << "<text x=\"16\" y=\"" << top + ph / 2 << "\" font-size=\"12\" transform=\"rotate(-90 16 " << top + ph / 2
    << ")\" text-anchor=\"middle\">online accuracy</text>\n";
  for (std::size_t i = 0; i < methods.size(); ++i) {
    const char* color = kPalette[i % std::size(kPalette)];
    const std::vector<double> c = smooth(methods[i].curve, window);
    const std::size_t stride = std::max<std::size_t>(1, c.size() / 1500);
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.2\" points=\"";
    for (std::size_t t = 0; t < c.size(); t += stride)
      s << num(left + pw * static_cast<double>(t) / static_cast<double>(std::max<std::size_t>(1, steps - 1)), 2) << ','
        << num(top + ph * (1.0 - c[t]), 2) << ' ';
    s << "\"/>\n<text x=\"" << left + pw + 10 << "\" y=\"" << top + 14 + 16 * i << "\" font-size=\"12\" fill=\""
      << color << "\">" << methods[i].name << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::string pr_scatter_svg(const std::vector<MethodStats>& methods) {
  const double w = 560, h = 480, left = 60, right = 130, top = 20, bottom = 50;
  const double pw = w - left - right, ph = h - top - bottom;
  std::set<double> gammas;
  for (const auto& m : methods)
    if (m.gamma && m.stats.count("f1")) gammas.insert(*m.gamma);
  const std::vector<double> order(gammas.begin(), gammas.end());
  auto color_of = [&](double g) {
    const auto k = static_cast<double>(std::find(order.begin(), order.end(), g) - order.begin());
    const double f = order.size() > 1 ? k / static_cast<double>(order.size() - 1) : 0.0;
    char buf[16];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(40 + 200 * f), 60,
                  static_cast<int>(220 - 180 * f));
    return std::string(buf);
  };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n"
    << "<text x=\"" << left + pw / 2 << "\" y=\"" << h - 12
    << "\" font-size=\"12\" text-anchor=\"middle\">recall</text>\n"
    << "<text x=\"16\" y=\"" << top + ph / 2 << "\" font-size=\"12\" transform=\"rotate(-90 16 " << top + ph / 2
    << ")\" text-anchor=\"middle\">precision</text>\n";
  for (int k = 0; k <= 4; ++k) {
    s << "<text x=\"" << left - 8 << "\" y=\"" << top + ph * (1.0 - k / 4.0) + 4
      << "\" font-size=\"11\" text-anchor=\"end\">" << num(k / 4.0, 2) << "</text>\n"
      << "<text x=\"" << left + pw * k / 4.0 << "\" y=\"" << top + ph + 16
      << "\" font-size=\"11\" text-anchor=\"middle\">" << num(k / 4.0, 2) << "</text>\n";
  }
  for (const auto& m : methods) {
    if (!m.gamma || !m.stats.count("f1")) continue;
    const std::string color = color_of(*m.gamma);
    for (const auto& r : m.runs)
      s << "<circle cx=\"" << num(left + pw * r.boundaries.recall, 2) << "\" cy=\""
        << num(top + ph * (1.0 - r.boundaries.precision), 2) << "\" r=\"3\" fill=\"" << color
        << "\" fill-opacity=\"0.5\"><title>" << m.name << " seed " << r.seed << "</title></circle>\n";
    s << "<circle cx=\"" << num(left + pw * m.stats.at("recall").mean, 2) << "\" cy=\""
      << num(top + ph * (1.0 - m.stats.at("precision").mean), 2) << "\" r=\"6\" fill=\"none\" stroke=\"" << color
      << "\" stroke-width=\"2\"><title>" << m.name << "</title></circle>\n";
  }
  for (std::size_t k = 0; k < order.size(); ++k)
    s << "<text x=\"" << left + pw + 12 << "\" y=\"" << top + 14 + 16 * k << "\" font-size=\"12\" fill=\""
      << color_of(order[k]) << "\">gamma " << order[k] << "</text>\n";
  s << "</svg>\n";
  return s.str();
}

std::string cmd_report(const std::string& dir, int window) {
  if (window < 1) throw ConfigError("--smooth must be >= 1");
  const std::vector<MethodStats> methods = collect(dir);
  const std::string table = format_table(methods);
  write_file(fs::path(dir) / "table.md", table);
  write_file(fs::path(dir) / "curves.svg", curves_svg(methods, window));
  write_file(fs::path(dir) / "pr.svg", pr_scatter_svg(methods));
  return table;
}

}  // namespace osaka::cli
