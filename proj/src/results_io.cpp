#include "cmdgoal/results_io.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "cmdgoal/error.hpp"

namespace cmdgoal {

using nlohmann::json;

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string k_label(double k) {
  std::ostringstream os;
  os << k;
  return os.str();
}

json aggregate_to_json(const Aggregate& a) {
  return {{"n_records", a.n_records}, {"ade", a.ade}, {"mde", a.mde}, {"pa", a.pa}};
}

Aggregate aggregate_from_json(const json& j) {
  Aggregate a;
  a.n_records = j.at("n_records").get<std::size_t>();
  a.ade = j.at("ade").get<double>();
  a.mde = j.at("mde").get<double>();
  a.pa = j.at("pa").get<std::vector<double>>();
  return a;
}

void open_out(std::ofstream& f, const std::string& path) {
  f.open(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
}

}  // namespace

json report_to_json(const MetricsReport& r) {
  json j;
  j["k_list"] = r.k_list;
  j["n_samples"] = r.n_samples;
  j["seed"] = std::to_string(r.seed);
  j["bootstrap_resamples"] = r.bootstrap_resamples;
  j["rows"] = json::array();
  for (const auto& row : r.rows) {
    json rj;
    rj["method"] = row.method;
    rj["n_records"] = row.n_records;
    rj["ade"] = row.ade;
    rj["ade_ci"] = {row.ade_ci.lo, row.ade_ci.hi};
    rj["mde"] = row.mde;
    rj["pa"] = row.pa;
    rj["pa_ci"] = json::array();
    for (const auto& ci : row.pa_ci) rj["pa_ci"].push_back({ci.lo, ci.hi});
    rj["per_intent"] = json::array();
    for (std::size_t i = 0; i < row.per_intent.size(); ++i) {
      json ij = row.per_intent[i] ? aggregate_to_json(*row.per_intent[i]) : json(nullptr);
      rj["per_intent"].push_back({{"intent", std::string(to_string(static_cast<IntentLabel>(i)))}, {"metrics", ij}});
    }
    rj["note"] = row.note;
    j["rows"].push_back(std::move(rj));
  }
  return j;
}

MetricsReport report_from_json(const json& j) {
  MetricsReport r;
  try {
    r.k_list = j.at("k_list").get<std::vector<double>>();
    r.n_samples = j.at("n_samples").get<std::size_t>();
    r.seed = std::stoull(j.at("seed").get<std::string>());
    r.bootstrap_resamples = j.at("bootstrap_resamples").get<std::size_t>();
    for (const auto& rj : j.at("rows")) {
      MethodRow row;
      row.method = rj.at("method").get<std::string>();
      row.n_records = rj.at("n_records").get<std::size_t>();
      row.ade = rj.at("ade").get<double>();
      row.ade_ci = {rj.at("ade_ci").at(0).get<double>(), rj.at("ade_ci").at(1).get<double>()};
      row.mde = rj.at("mde").get<double>();
      row.pa = rj.at("pa").get<std::vector<double>>();
      for (const auto& c : rj.at("pa_ci")) row.pa_ci.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
      for (const auto& ij : rj.at("per_intent")) {
        const auto& m = ij.at("metrics");
        row.per_intent.push_back(m.is_null() ? std::nullopt : std::optional<Aggregate>(aggregate_from_json(m)));
      }
      row.note = rj.value("note", "");
      r.rows.push_back(std::move(row));
    }
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed results JSON: ") + e.what());
  }
  return r;
}

MetricsReport read_results_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "'");
  try {
    return report_from_json(json::parse(f));
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("malformed results JSON: ") + e.what());
  }
}

ResultFiles write_results(const MetricsReport& r, const std::string& prefix) {
  const auto parent = std::filesystem::path(prefix).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  ResultFiles files{prefix + ".csv", "", prefix + ".json"};

  std::ofstream csv;
  open_out(csv, files.csv);
  csv << "method,n_records,ade,ade_ci_lo,ade_ci_hi,mde";
  for (double k : r.k_list) {
    const auto l = k_label(k);
    csv << ",pa_" << l << ",pa_" << l << "_ci_lo,pa_" << l << "_ci_hi";
  }
  csv << '\n';
  for (const auto& row : r.rows) {
    csv << row.method << ',' << row.n_records << ',' << fmt(row.ade) << ',' << fmt(row.ade_ci.lo) << ','
        << fmt(row.ade_ci.hi) << ',' << fmt(row.mde);
    for (std::size_t k = 0; k < row.pa.size(); ++k) {
      const Interval ci = k < row.pa_ci.size() ? row.pa_ci[k] : Interval{row.pa[k], row.pa[k]};
      csv << ',' << fmt(row.pa[k]) << ',' << fmt(ci.lo) << ',' << fmt(ci.hi);
    }
    csv << '\n';
  }
  if (!csv) throw IoError("write failed for '" + files.csv + "'");

  bool any_intent = false;
  for (const auto& row : r.rows) any_intent |= !row.per_intent.empty();
  if (any_intent) {
    files.per_intent_csv = prefix + "_per_intent.csv";
    std::ofstream pi;
    open_out(pi, files.per_intent_csv);
    pi << "method,intent,n_records,ade,mde";
    for (double k : r.k_list) pi << ",pa_" << k_label(k);
    pi << '\n';
    for (const auto& row : r.rows) {
      for (std::size_t i = 0; i < row.per_intent.size(); ++i) {
        pi << row.method << ',' << to_string(static_cast<IntentLabel>(i)) << ',';
        if (const auto& a = row.per_intent[i]) {
          pi << a->n_records << ',' << fmt(a->ade) << ',' << fmt(a->mde);
          for (double p : a->pa) pi << ',' << fmt(p);
        } else {
          pi << "0,,";
          for (std::size_t k = 0; k < r.k_list.size(); ++k) pi << ',';
        }
        pi << '\n';
      }
    }
    if (!pi) throw IoError("write failed for '" + files.per_intent_csv + "'");
  }

  std::ofstream js;
  open_out(js, files.json);
  js << report_to_json(r).dump(2) << '\n';
  if (!js) throw IoError("write failed for '" + files.json + "'");
  return files;
}

}  // namespace cmdgoal
