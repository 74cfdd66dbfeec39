#pragma once

#include <span>
#include <stdexcept>
#include <vector>

namespace roadnav::stats {

class DegenerateSample : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Pearson correlation via single-pass co-moment updates. Throws
/// DegenerateSample for fewer than two points or a constant input.
double pearson(std::span<const double> x, std::span<const double> y);

/// Ranks starting at 1, ties sharing their average rank.
std::vector<double> ranks(std::span<const double> x);

double spearman(std::span<const double> x, std::span<const double> y);

double median(std::vector<double> values);
double mean(std::span<const double> values);

}  // namespace roadnav::stats
