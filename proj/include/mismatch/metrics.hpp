#pragma once

// Segmentation overlap and calibration statistics.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mismatch::metrics {

/// |pred & gt| / |pred | gt| over binary masks; 1.0 when both are empty.
double iou(std::span<const double> pred, std::span<const double> gt);

/// 1 where p >= threshold, else 0.
std::vector<double> binarize(std::span<const double> probs, double threshold = 0.5);

enum class ConfidenceMode {
  max_class,  // c = max(p, 1 - p), bins over [0.5, 1]
  raw,        // c = p, bins over [0, 1]
};

std::string_view to_string(ConfidenceMode mode);
ConfidenceMode parse_confidence_mode(std::string_view name);

struct ReliabilityBin {
  double low = 0.0;
  double high = 0.0;
  std::size_t count = 0;
  double accuracy = 0.0;    // 0 for empty bins
  double confidence = 0.0;  // 0 for empty bins
};

struct ReliabilityBins {
  std::vector<ReliabilityBin> bins;
  std::size_t total = 0;
};

/// Sums per-pixel outcomes into M equal-width bins. Intervals are
/// right-closed, the first one also left-closed. Several images can be fed
/// to one accumulator to obtain dataset-wide (pooled) bins.
class BinAccumulator {
 public:
  explicit BinAccumulator(std::size_t bins, ConfidenceMode mode = ConfidenceMode::max_class,
                          double threshold = 0.5);

  void add(std::span<const double> probs, std::span<const double> gt);
  ReliabilityBins result() const;

  std::size_t bin_index(double confidence) const;
  const std::vector<double>& edges() const { return edges_; }

 private:
  ConfidenceMode mode_;
  double threshold_;
  std::vector<double> edges_;
  std::vector<std::size_t> count_;
  std::vector<std::size_t> correct_;
  std::vector<double> conf_sum_;
};

ReliabilityBins reliability_bins(std::span<const double> probs, std::span<const double> gt,
                                 std::size_t bins, ConfidenceMode mode = ConfidenceMode::max_class,
                                 double threshold = 0.5);

/// sum_m |B_m| / n * |acc(B_m) - conf(B_m)|. Throws ParameterError when n == 0.
double ece(const ReliabilityBins& bins);

using Echo = std::vector<std::pair<std::string, std::string>>;

/// bin_low,bin_high,count,accuracy,confidence
void write_reliability_csv(const std::filesystem::path& path, const ReliabilityBins& bins,
                           const Echo& echo = {});
ReliabilityBins read_reliability_csv(const std::filesystem::path& path);

struct MetricsRow {
  std::string experiment;
  std::uint64_t seed = 0;
  std::string model;
  double iou = 0.0;
  double ece = 0.0;
};

/// experiment,seed,model,iou,ece
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows,
                       const Echo& echo = {});
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

}  // namespace mismatch::metrics
