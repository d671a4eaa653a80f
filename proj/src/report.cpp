#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "wmhseg/errors.hpp"
#include "wmhseg/harness.hpp"

namespace wmhseg::harness {

std::string_view to_string(Aggregation aggregation) {
  return aggregation == Aggregation::PerFold ? "per_fold" : "per_slice";
}

std::string_view to_string(ReportFormat format) {
  switch (format) {
    case ReportFormat::Text: return "text";
    case ReportFormat::Csv: return "csv";
    case ReportFormat::Markdown: return "markdown";
  }
  return "text";
}

ReportFormat parse_report_format(std::string_view text) {
  std::string t(text);
  for (auto& ch : t) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (t == "text" || t == "txt") return ReportFormat::Text;
  if (t == "csv") return ReportFormat::Csv;
  if (t == "markdown" || t == "md") return ReportFormat::Markdown;
  throw ConfigError("unknown report format '" + std::string(text) + "' (expected text, csv or markdown)");
}

// ---- ScoreTable ----------------------------------------------------------------

const ScoreRow* ScoreTable::find(ModelKind kind, const std::string& dataset) const {
  for (const auto& r : rows)
    if (r.kind == kind && r.dataset == dataset) return &r;
  return nullptr;
}

std::vector<ModelKind> ScoreTable::kinds() const {
  std::vector<ModelKind> out;
  for (const auto& r : rows)
    if (std::find(out.begin(), out.end(), r.kind) == out.end()) out.push_back(r.kind);
  return out;
}

std::vector<std::string> ScoreTable::datasets() const {
  std::vector<std::string> out;
  bool average = false;
  for (const auto& r : rows) {
    if (r.dataset == kAverageRow) {
      average = true;
      continue;
    }
    if (std::find(out.begin(), out.end(), r.dataset) == out.end()) out.push_back(r.dataset);
  }
  if (average) out.push_back(kAverageRow);
  return out;
}

std::string ScoreTable::to_tsv() const {
  std::ostringstream os;
  os << "# title=" << title << '\n' << "# aggregation=" << to_string(aggregation) << '\n';
  char buf[64];
  for (const auto& r : rows) {
    os << wmhseg::to_string(r.kind) << '\t' << r.dataset << '\t';
    std::snprintf(buf, sizeof buf, "%.17g\t%.17g", r.mean, r.std);
    os << buf << '\t' << r.n << '\n';
  }
  return os.str();
}

ScoreTable ScoreTable::parse_tsv(const std::string& text) {
  ScoreTable t;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line.rfind("# title=", 0) == 0) {
      t.title = line.substr(8);
      continue;
    }
    if (line.rfind("# aggregation=", 0) == 0) {
      const auto v = line.substr(14);
      if (v == "per_fold") t.aggregation = Aggregation::PerFold;
      else if (v == "per_slice") t.aggregation = Aggregation::PerSlice;
      else throw FormatError(FormatErrorKind::BadMetadata, "score table: unknown aggregation '" + v + "'");
      continue;
    }
    if (line[0] == '#') continue;
    std::istringstream ls(line);
    std::string kind, dataset;
    ScoreRow r;
    if (!std::getline(ls, kind, '\t') || !std::getline(ls, dataset, '\t') || !(ls >> r.mean >> r.std >> r.n))
      throw FormatError(FormatErrorKind::BadMetadata, "score table: malformed line '" + line + "'");
    const auto k = parse_model_kind(kind);
    if (!k) throw FormatError(FormatErrorKind::BadMetadata, "score table: unknown model kind '" + kind + "'");
    r.kind = *k;
    r.dataset = dataset;
    t.rows.push_back(r);
  }
  return t;
}

ScoreTable ScoreTable::merge(const std::vector<ScoreTable>& tables) {
  ScoreTable out;
  if (tables.empty()) return out;
  out.title = tables.front().title;
  out.aggregation = tables.front().aggregation;
  for (const auto& t : tables) out.rows.insert(out.rows.end(), t.rows.begin(), t.rows.end());
  return out;
}

std::string slice_scores_tsv(const std::vector<SliceScore>& scores) {
  std::ostringstream os;
  char buf[32];
  for (const auto& s : scores) {
    std::snprintf(buf, sizeof buf, "%.6f", s.dsc);
    os << s.slice_id << '\t' << wmhseg::to_string(s.kind) << '\t' << buf << '\n';
  }
  return os.str();
}

std::string format_signed(double value, int decimals) {
  const double scale = std::pow(10.0, decimals);
  double rounded = std::round(value * scale) / scale;
  if (rounded == 0.0) rounded = 0.0;  // folds -0 into +0
  char buf[64];
  std::snprintf(buf, sizeof buf, "%+.*f", decimals, rounded);
  return buf;
}

// ---- rendering ------------------------------------------------------------------

namespace {

struct Grid {
  std::string title;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> cells;
  std::vector<std::vector<bool>> best;
};

std::string render_grid(const Grid& g, ReportFormat format) {
  std::ostringstream os;
  auto decorated = [&](std::size_t r, std::size_t c) {
    const auto& cell = g.cells[r][c];
    if (!g.best[r][c]) return cell;
    return format == ReportFormat::Markdown ? "**" + cell + "**" : cell + "*";
  };
  switch (format) {
    case ReportFormat::Text: {
      std::vector<std::size_t> width(g.header.size());
      for (std::size_t c = 0; c < g.header.size(); ++c) {
        width[c] = g.header[c].size();
        for (std::size_t r = 0; r < g.cells.size(); ++r) width[c] = std::max(width[c], decorated(r, c).size());
      }
      auto line = [&](const std::vector<std::string>& items) {
        std::string out;
        for (std::size_t c = 0; c < items.size(); ++c) {
          std::string item = items[c];
          if (c + 1 < items.size()) item.resize(width[c], ' ');
          out += item;
          if (c + 1 < items.size()) out += "  ";
        }
        while (!out.empty() && out.back() == ' ') out.pop_back();
        return out + '\n';
      };
      os << g.title << '\n' << line(g.header);
      std::string rule;
      for (std::size_t c = 0; c < width.size(); ++c) rule += std::string(width[c], '-') + (c + 1 < width.size() ? "  " : "");
      os << rule << '\n';
      for (std::size_t r = 0; r < g.cells.size(); ++r) {
        std::vector<std::string> items;
        for (std::size_t c = 0; c < g.header.size(); ++c) items.push_back(decorated(r, c));
        os << line(items);
      }
      break;
    }
    case ReportFormat::Csv: {
      os << "# " << g.title << '\n';
      for (std::size_t c = 0; c < g.header.size(); ++c) os << (c ? "," : "") << g.header[c];
      os << '\n';
      for (std::size_t r = 0; r < g.cells.size(); ++r) {
        for (std::size_t c = 0; c < g.header.size(); ++c) os << (c ? "," : "") << decorated(r, c);
        os << '\n';
      }
      break;
    }
    case ReportFormat::Markdown: {
      os << "### " << g.title << "\n\n|";
      for (const auto& h : g.header) os << ' ' << h << " |";
      os << "\n|";
      for (std::size_t c = 0; c < g.header.size(); ++c) os << (c == 0 ? " --- |" : " ---: |");
      os << '\n';
      for (std::size_t r = 0; r < g.cells.size(); ++r) {
        os << '|';
        for (std::size_t c = 0; c < g.header.size(); ++c) os << ' ' << decorated(r, c) << " |";
        os << '\n';
      }
      break;
    }
  }
  return os.str();
}

std::string cell(double mean, double std) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f (%.3f)", mean, std);
  return buf;
}

}  // namespace

std::string render_scores(const ScoreTable& table, ReportFormat format) {
  if (table.rows.empty()) throw std::invalid_argument("render_scores: empty table");
  const auto kinds = table.kinds();
  const auto datasets = table.datasets();
  Grid g;
  g.title = table.title;
  g.header.push_back("Model");
  for (const auto& d : datasets) g.header.push_back(d);
  g.cells.assign(kinds.size(), std::vector<std::string>(g.header.size(), "-"));
  g.best.assign(kinds.size(), std::vector<bool>(g.header.size(), false));
  for (std::size_t r = 0; r < kinds.size(); ++r) {
    g.cells[r][0] = std::string(display_name(kinds[r]));
    for (std::size_t c = 0; c < datasets.size(); ++c)
      if (const auto* row = table.find(kinds[r], datasets[c])) g.cells[r][c + 1] = cell(row->mean, row->std);
  }
  // Compare at printed precision so visually tied cells are marked together.
  for (std::size_t c = 0; c < datasets.size(); ++c) {
    std::vector<std::pair<std::size_t, long long>> present;
    for (std::size_t r = 0; r < kinds.size(); ++r)
      if (const auto* row = table.find(kinds[r], datasets[c])) present.emplace_back(r, std::llround(row->mean * 1000.0));
    if (present.size() < 2) continue;
    long long top = present.front().second;
    for (const auto& p : present) top = std::max(top, p.second);
    for (const auto& p : present)
      if (p.second == top) g.best[p.first][c + 1] = true;
  }
  return render_grid(g, format);
}

std::string render_gains(const std::vector<GainTable>& gains, ReportFormat format) {
  if (gains.empty()) throw std::invalid_argument("render_gains: no rows");
  Grid g;
  g.title = "Increase in DSC from the probabilistic variant";
  g.header.push_back("Model");
  for (const auto& r : gains.front().rows) g.header.push_back(r.dataset);
  for (const auto& gt : gains) {
    if (gt.rows.size() + 1 != g.header.size()) throw std::invalid_argument("render_gains: rows differ in datasets");
    std::vector<std::string> row{std::string(display_name(gt.det_kind))};
    for (std::size_t i = 0; i < gt.rows.size(); ++i) {
      if (gt.rows[i].dataset != g.header[i + 1]) throw std::invalid_argument("render_gains: rows differ in datasets");
      row.push_back(format_signed(gt.rows[i].delta));
    }
    g.cells.push_back(std::move(row));
    g.best.emplace_back(g.header.size(), false);
  }
  return render_grid(g, format);
}

std::string render_report(const std::vector<ScoreTable>& tables, ReportFormat format) {
  if (tables.empty()) throw std::invalid_argument("render_report: no tables");
  std::string out;
  for (std::size_t i = 0; i < tables.size(); ++i) {
    if (i) out += '\n';
    out += render_scores(tables[i], format);
  }
  return out;
}

}  // namespace wmhseg::harness
