#include "mismatch/metrics.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "mismatch/errors.hpp"
#include "mismatch/util.hpp"

namespace mismatch::metrics {

double iou(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size()) throw DimensionError("iou: mask sizes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] > 0.5, b = gt[i] > 0.5;
    inter += (a && b) ? 1 : 0;
    uni += (a || b) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<double> binarize(std::span<const double> probs, double threshold) {
  std::vector<double> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] >= threshold ? 1.0 : 0.0;
  return out;
}

std::string_view to_string(ConfidenceMode mode) {
  return mode == ConfidenceMode::max_class ? "max_class" : "raw";
}

ConfidenceMode parse_confidence_mode(std::string_view name) {
  if (name == "max_class") return ConfidenceMode::max_class;
  if (name == "raw") return ConfidenceMode::raw;
  throw ConfigError("unknown confidence mode '" + std::string(name) + "'");
}

BinAccumulator::BinAccumulator(std::size_t bins, ConfidenceMode mode, double threshold)
    : mode_(mode), threshold_(threshold) {
  if (bins < 1) throw ParameterError("reliability diagrams need at least one bin");
  const double lo = mode == ConfidenceMode::max_class ? 0.5 : 0.0;
  const double hi = 1.0;
  edges_.resize(bins + 1);
  for (std::size_t m = 0; m <= bins; ++m) {
    edges_[m] = lo + (hi - lo) * static_cast<double>(m) / static_cast<double>(bins);
  }
  count_.assign(bins, 0);
  correct_.assign(bins, 0);
  conf_sum_.assign(bins, 0.0);
}

std::size_t BinAccumulator::bin_index(double c) const {
  const std::size_t M = count_.size();
  const double lo = edges_.front(), width = (edges_.back() - lo) / static_cast<double>(M);
  double guess = std::ceil((c - lo) / width) - 1.0;
  std::size_t m = guess <= 0.0 ? 0 : std::min(static_cast<std::size_t>(guess), M - 1);
  while (m > 0 && c <= edges_[m]) --m;
  while (m + 1 < M && c > edges_[m + 1]) ++m;
  return m;
}

void BinAccumulator::add(std::span<const double> probs, std::span<const double> gt) {
  if (probs.size() != gt.size()) throw DimensionError("reliability: prediction and mask sizes differ");
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    const double c = mode_ == ConfidenceMode::max_class ? std::max(p, 1.0 - p) : p;
    const bool predicted = p >= threshold_;
    const bool truth = gt[i] > 0.5;
    const std::size_t m = bin_index(c);
    ++count_[m];
    correct_[m] += predicted == truth ? 1 : 0;
    conf_sum_[m] += c;
  }
}

ReliabilityBins BinAccumulator::result() const {
  ReliabilityBins out;
  for (std::size_t m = 0; m < count_.size(); ++m) {
    ReliabilityBin b;
    b.low = edges_[m];
    b.high = edges_[m + 1];
    b.count = count_[m];
    if (b.count > 0) {
      b.accuracy = static_cast<double>(correct_[m]) / static_cast<double>(b.count);
      b.confidence = conf_sum_[m] / static_cast<double>(b.count);
    }
    out.total += b.count;
    out.bins.push_back(b);
  }
  return out;
}

ReliabilityBins reliability_bins(std::span<const double> probs, std::span<const double> gt,
                                 std::size_t bins, ConfidenceMode mode, double threshold) {
  BinAccumulator acc(bins, mode, threshold);
  acc.add(probs, gt);
  return acc.result();
}

double ece(const ReliabilityBins& bins) {
  if (bins.total == 0) throw ParameterError("ECE is undefined for zero pixels");
  double e = 0.0;
  const double n = static_cast<double>(bins.total);
  for (const auto& b : bins.bins) {
    if (b.count == 0) continue;
    e += static_cast<double>(b.count) / n * std::abs(b.accuracy - b.confidence);
  }
  return e;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

std::vector<std::vector<std::string>> read_rows(const std::filesystem::path& path,
                                                std::string_view header) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  bool seen_header = false;
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!seen_header) {
      if (line != header) throw FormatError(path.string() + ": unexpected header '" + line + "'", 0);
      seen_header = true;
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    rows.push_back(std::move(fields));
  }
  if (!seen_header) throw FormatError(path.string() + ": missing header", 0);
  return rows;
}

constexpr std::string_view kReliabilityHeader = "bin_low,bin_high,count,accuracy,confidence";
constexpr std::string_view kMetricsHeader = "experiment,seed,model,iou,ece";

}  // namespace

void write_reliability_csv(const std::filesystem::path& path, const ReliabilityBins& bins,
                           const Echo& echo) {
  auto out = open_out(path);
  write_echo(out, echo);
  out << kReliabilityHeader << '\n';
  for (const auto& b : bins.bins) {
    out << format_double(b.low) << ',' << format_double(b.high) << ',' << b.count << ','
        << format_double(b.accuracy) << ',' << format_double(b.confidence) << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

ReliabilityBins read_reliability_csv(const std::filesystem::path& path) {
  ReliabilityBins out;
  for (const auto& f : read_rows(path, kReliabilityHeader)) {
    if (f.size() != 5) throw FormatError(path.string() + ": expected 5 fields", 0);
    ReliabilityBin b{std::stod(f[0]), std::stod(f[1]), std::stoul(f[2]), std::stod(f[3]),
                     std::stod(f[4])};
    out.total += b.count;
    out.bins.push_back(b);
  }
  return out;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows,
                       const Echo& echo) {
  auto out = open_out(path);
  write_echo(out, echo);
  out << kMetricsHeader << '\n';
  for (const auto& r : rows) {
    out << r.experiment << ',' << r.seed << ',' << r.model << ',' << format_double(r.iou) << ','
        << format_double(r.ece) << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::vector<MetricsRow> rows;
  for (const auto& f : read_rows(path, kMetricsHeader)) {
    if (f.size() != 5) throw FormatError(path.string() + ": expected 5 fields", 0);
    rows.push_back({f[0], std::stoull(f[1]), f[2], std::stod(f[3]), std::stod(f[4])});
  }
  return rows;
}

}  // namespace mismatch::metrics
