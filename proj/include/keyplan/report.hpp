#pragma once

// Metrics reports: tabular rows written as CSV, loss curves read back from
// metrics.jsonl, and static SVG plots.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "keyplan/common.hpp"

namespace keyplan {

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

/// Wilson score interval for a binomial proportion (z = 1.96 by default).
inline Interval wilson_interval(int successes, int trials, double z = 1.959963984540054) {
  if (trials <= 0) return {0.0, 1.0};
  if (successes < 0 || successes > trials) throw InvalidInput("wilson_interval: successes outside [0, trials]");
  const double n = trials, p = successes / n, z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double centre = (p + z2 / (2.0 * n)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  return {successes == 0 ? 0.0 : std::max(0.0, centre - half), successes == trials ? 1.0 : std::min(1.0, centre + half)};
}

inline std::string fmt_num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// One reported number. `value` is text so that ">budget" fits.
struct ReportRow {
  std::string run_id;
  std::string experiment;
  std::string arm;
  std::uint64_t seed = 0;
  std::string metric;
  std::string value;
  int trials = 0;
  std::optional<Interval> ci;
  std::string reference_value;
};

struct CurvePoint {
  int step = 0;
  double loss = 0.0;
};

struct LossCurve {
  std::string label;
  std::vector<CurvePoint> points;
};

struct MetricsReport {
  std::string title;
  std::vector<std::string> notes;
  std::vector<ReportRow> rows;
  std::vector<LossCurve> curves;
  bool complete = true;

  void add_success(const std::string& run_id, const std::string& experiment, const std::string& arm,
                   std::uint64_t seed, int successes, int trials, const std::string& reference = {}) {
    rows.push_back({run_id, experiment, arm, seed, "success_rate",
                    fmt_num(trials > 0 ? static_cast<double>(successes) / trials : 0.0), trials,
                    wilson_interval(successes, trials), reference});
  }
  void add_value(const std::string& run_id, const std::string& experiment, const std::string& arm,
                 std::uint64_t seed, const std::string& metric, const std::string& value,
                 const std::string& reference = {}) {
    rows.push_back({run_id, experiment, arm, seed, metric, value, 0, std::nullopt, reference});
  }
  std::vector<const ReportRow*> find(const std::string& metric) const {
    std::vector<const ReportRow*> out;
    for (const auto& r : rows)
      if (r.metric == metric) out.push_back(&r);
    return out;
  }
};

inline constexpr const char* kReportHeader = "run_id,experiment,arm,seed,metric,value,trials,ci_low,ci_high,reference_value";

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

/// Notes become leading `# ` comment lines, then the header and one line per row.
inline void write_report_csv(std::ostream& out, const MetricsReport& rep) {
  if (!rep.title.empty()) out << "# " << rep.title << '\n';
  for (const auto& n : rep.notes) out << "# " << n << '\n';
  if (!rep.complete) out << "# status: incomplete\n";
  out << kReportHeader << '\n';
  for (const auto& r : rep.rows) {
    out << csv_escape(r.run_id) << ',' << csv_escape(r.experiment) << ',' << csv_escape(r.arm) << ',' << r.seed << ','
        << csv_escape(r.metric) << ',' << csv_escape(r.value) << ',' << r.trials << ','
        << (r.ci ? fmt_num(r.ci->low) : "") << ',' << (r.ci ? fmt_num(r.ci->high) : "") << ','
        << csv_escape(r.reference_value) << '\n';
  }
}

inline void write_report_csv(const std::string& path, const MetricsReport& rep) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  write_report_csv(out, rep);
}

inline std::vector<std::string> split_csv_quoted(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  if (quoted) throw InvalidInput("unterminated quote in report line");
  return out;
}

inline MetricsReport read_report_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open report " + path);
  MetricsReport rep;
  std::string line;
  bool header = false;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line.rfind("# ", 0) == 0) {
      const auto text = line.substr(2);
      if (text == "status: incomplete") rep.complete = false;
      else if (rep.title.empty() && rep.notes.empty()) rep.title = text;
      else rep.notes.push_back(text);
      continue;
    }
    if (!header) {
      if (line != kReportHeader) throw InvalidInput(path + ": unexpected report header");
      header = true;
      continue;
    }
    const auto f = split_csv_quoted(line);
    if (f.size() != 10) throw InvalidInput(path + " line " + std::to_string(lineno) + ": expected 10 fields");
    ReportRow r;
    r.run_id = f[0];
    r.experiment = f[1];
    r.arm = f[2];
    r.seed = std::stoull(f[3]);
    r.metric = f[4];
    r.value = f[5];
    r.trials = std::stoi(f[6]);
    if (!f[7].empty()) r.ci = Interval{std::stod(f[7]), std::stod(f[8])};
    r.reference_value = f[9];
    rep.rows.push_back(std::move(r));
  }
  if (!header) throw InvalidInput(path + ": missing report header");
  return rep;
}

/// Groups metrics.jsonl records into one curve per (run, stage).
inline std::vector<LossCurve> read_loss_curves(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open metrics " + path);
  std::map<std::string, LossCurve> curves;
  std::vector<std::string> order;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw InvalidInput(path + " line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.contains("step") || !j.contains("stage") || !j.contains("loss"))
      throw InvalidInput(path + " line " + std::to_string(lineno) + ": missing step, stage or loss");
    std::string label = j.value("run", std::string{});
    label += (label.empty() ? "" : "/") + j.at("stage").get<std::string>();
    if (!curves.count(label)) {
      order.push_back(label);
      curves[label].label = label;
    }
    curves[label].points.push_back({j.at("step").get<int>(), j.at("loss").get<double>()});
  }
  std::vector<LossCurve> out;
  for (const auto& l : order) out.push_back(curves[l]);
  return out;
}

namespace detail {
inline constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}
}  // namespace detail

/// Loss-vs-step line chart.
inline std::string loss_plot_svg(const std::vector<LossCurve>& curves, const std::string& title) {
  constexpr double W = 640, H = 400, L = 60, R = 180, T = 40, B = 50;
  double max_step = 1, lo = 0, hi = 1;
  bool any = false;
  for (const auto& c : curves)
    for (const auto& p : c.points) {
      max_step = std::max(max_step, static_cast<double>(p.step));
      if (!any) lo = hi = p.loss;
      lo = std::min(lo, p.loss);
      hi = std::max(hi, p.loss);
      any = true;
    }
  if (hi - lo < 1e-9) hi = lo + 1.0;
  auto x = [&](double s) { return L + (W - L - R) * s / max_step; };
  auto y = [&](double v) { return T + (H - T - B) * (1.0 - (v - lo) / (hi - lo)); };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
    << detail::xml_escape(title) << "</text>\n"
    << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = lo + (hi - lo) * i / 4.0, s = max_step * i / 4.0;
    o << "<text x=\"" << L - 6 << "\" y=\"" << y(v) + 4 << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
      << "font-size=\"11\">" << fmt_num(v, 2) << "</text>\n"
      << "<text x=\"" << x(s) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
      << "font-size=\"11\">" << static_cast<long>(s) << "</text>\n";
  }
  o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">step</text>\n"
    << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 16 " << (T + H - B) / 2
    << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">loss</text>\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const char* col = detail::kPalette[i % std::size(detail::kPalette)];
    o << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& p : curves[i].points) o << fmt_num(x(p.step), 1) << ',' << fmt_num(y(p.loss), 1) << ' ';
    o << "\"/>\n"
      << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (i + 1) << "\" fill=\"" << col
      << "\" font-family=\"sans-serif\" font-size=\"11\">" << detail::xml_escape(curves[i].label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

struct Bar {
  std::string label;
  double value = 0.0;
  std::optional<Interval> ci;
};

/// Success-rate bar chart on [0, 1] with interval whiskers.
inline std::string bar_plot_svg(const std::vector<Bar>& bars, const std::string& title) {
  constexpr double W = 640, H = 400, L = 60, R = 20, T = 40, B = 90;
  const double slot = bars.empty() ? 1.0 : (W - L - R) / static_cast<double>(bars.size());
  auto y = [&](double v) { return T + (H - T - B) * (1.0 - std::clamp(v, 0.0, 1.0)); };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
    << detail::xml_escape(title) << "</text>\n"
    << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i)
    o << "<text x=\"" << L - 6 << "\" y=\"" << y(i / 4.0) + 4 << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
      << "font-size=\"11\">" << fmt_num(i / 4.0, 2) << "</text>\n";
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double cx = L + slot * (i + 0.5), bw = slot * 0.6;
    const char* col = detail::kPalette[i % std::size(detail::kPalette)];
    o << "<rect x=\"" << cx - bw / 2 << "\" y=\"" << y(bars[i].value) << "\" width=\"" << bw << "\" height=\""
      << y(0.0) - y(bars[i].value) << "\" fill=\"" << col << "\"/>\n";
    if (bars[i].ci)
      o << "<line x1=\"" << cx << "\" y1=\"" << y(bars[i].ci->low) << "\" x2=\"" << cx << "\" y2=\""
        << y(bars[i].ci->high) << "\" stroke=\"black\"/>\n";
    o << "<text x=\"" << cx << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
      << "font-size=\"11\">" << detail::xml_escape(bars[i].label) << "</text>\n"
      << "<text x=\"" << cx << "\" y=\"" << y(bars[i].value) - 4
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << fmt_num(bars[i].value, 2)
      << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

inline std::vector<Bar> success_bars(const MetricsReport& rep) {
  std::vector<Bar> out;
  for (const auto* r : rep.find("success_rate"))
    out.push_back({r->experiment.empty() ? r->arm : r->experiment + ":" + r->arm, std::stod(r->value), r->ci});
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

}  // namespace keyplan
