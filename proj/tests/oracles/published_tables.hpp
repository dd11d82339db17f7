#pragma once

// Rounded per-site means of a three-site evaluation (sites TUM, UME, UKF;
// metrics DSC, NSD, HSD, NAVE per site). Blank cells are models not
// evaluated on their own training site.

#include <optional>
#include <string>
#include <vector>

#include "oracles/rank_oracle.hpp"

namespace oracle {

inline const std::vector<std::string> kTableSites{"TUM", "UME", "UKF"};

inline Table kPersonalizationTable() {
  [[maybe_unused]] const std::optional<double> na;
  Table t;
  t.n_sites = 3;
  t.models.push_back("L_i");
  t.values.push_back({0.44, 0.33, 156.53, 2.04, 0.41, 0.36, 117.99, 8.56, 0.50, 0.40, 146.48, 43.69});
  t.models.push_back("E");
  t.values.push_back({0.47, 0.34, 147.47, 2.71, 0.43, 0.37, 119.23, 8.53, 0.43, 0.36, 131.35, 3.65});
  t.models.push_back("FL");
  t.values.push_back({0.46, 0.32, 146.64, 1.82, 0.44, 0.35, 155.62, 4.20, 0.49, 0.39, 133.18, 2.32});
  t.models.push_back("Spec(E)");
  t.values.push_back({0.47, 0.34, 144.50, 2.60, 0.42, 0.38, 104.75, 8.43, 0.46, 0.39, 123.96, 3.06});
  t.models.push_back("Spec(FL)");
  t.values.push_back({0.47, 0.33, 144.33, 1.36, 0.43, 0.39, 117.85, 6.56, 0.51, 0.45, 121.65, 10.66});
  return t;
}

inline Table kWithoutLocalTable() {
  [[maybe_unused]] const std::optional<double> na;
  Table t;
  t.n_sites = 3;
  t.models.push_back("L_TUM");
  t.values.push_back({na, na, na, na, 0.32, 0.24, 149.38, 11.47, 0.35, 0.27, 149.79, 73.06});
  t.models.push_back("L_UME");
  t.values.push_back({0.38, 0.29, 159.35, 5.47, na, na, na, na, 0.30, 0.25, 169.78, 875.40});
  t.models.push_back("L_UKF");
  t.values.push_back({0.44, 0.29, 151.58, 4.11, 0.42, 0.33, 155.31, 9.20, na, na, na, na});
  t.models.push_back("E_leave-i-out");
  t.values.push_back({0.44, 0.30, 142.26, 3.56, 0.39, 0.32, 137.82, 8.17, 0.34, 0.29, 143.21, 12.06});
  t.models.push_back("FL_leave-i-out");
  t.values.push_back({0.45, 0.31, 138.78, 3.47, 0.42, 0.36, 134.87, 6.40, 0.38, 0.32, 149.14, 18.71});
  return t;
}

inline Table kWithLocalTable() {
  [[maybe_unused]] const std::optional<double> na;
  Table t;
  t.n_sites = 3;
  t.models.push_back("L_TUM");
  t.values.push_back({0.44, 0.33, 156.53, 2.04, 0.32, 0.24, 149.38, 11.47, 0.35, 0.27, 149.79, 73.06});
  t.models.push_back("L_UME");
  t.values.push_back({0.38, 0.29, 159.35, 5.47, 0.41, 0.36, 117.99, 8.56, 0.30, 0.25, 169.78, 875.40});
  t.models.push_back("L_UKF");
  t.values.push_back({0.44, 0.29, 151.58, 4.11, 0.42, 0.33, 155.31, 9.20, 0.50, 0.40, 146.48, 43.69});
  t.models.push_back("E");
  t.values.push_back({0.45, 0.36, 144.22, 2.04, 0.39, 0.35, 143.63, 5.00, 0.40, 0.35, 127.44, 44.74});
  t.models.push_back("FL_leave-i-out");
  t.values.push_back({0.45, 0.31, 138.78, 3.47, 0.42, 0.36, 134.87, 6.40, 0.38, 0.32, 149.14, 18.71});
  t.models.push_back("Spec(E)");
  t.values.push_back({0.47, 0.34, 144.50, 2.60, 0.42, 0.38, 104.75, 8.43, 0.46, 0.39, 123.96, 3.06});
  t.models.push_back("Spec(FL_leave-i-out)");
  t.values.push_back({0.48, 0.33, 136.57, 0.98, 0.44, 0.39, 112.69, 6.79, 0.45, 0.39, 127.19, 3.19});
  return t;
}

}  // namespace oracle
