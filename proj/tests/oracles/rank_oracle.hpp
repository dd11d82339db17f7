#pragma once

// Fractional ranking by counting: a value's rank is one plus the number of
// strictly better values plus half the number of other values tied with it.

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace oracle {

struct Table {
  std::vector<std::string> models;
  // values[model][site * 4 + metric]; nullopt marks a blank cell
  std::vector<std::vector<std::optional<double>>> values;
  std::size_t n_sites = 0;
};

inline std::map<std::string, double> mean_ranks(const Table& t) {
  std::map<std::string, double> sum, count;
  for (std::size_t s = 0; s < t.n_sites; ++s)
    for (std::size_t m = 0; m < 4; ++m) {
      const std::size_t col = s * 4 + m;
      const bool higher_better = m < 2;
      for (std::size_t a = 0; a < t.models.size(); ++a) {
        if (!t.values[a][col]) continue;
        const double va = *t.values[a][col];
        double better = 0, tied = 0;
        for (std::size_t b = 0; b < t.models.size(); ++b) {
          if (b == a || !t.values[b][col]) continue;
          const double vb = *t.values[b][col];
          if (vb == va) ++tied;
          else if (higher_better ? vb > va : vb < va) ++better;
        }
        sum[t.models[a]] += 1.0 + better + tied / 2.0;
        count[t.models[a]] += 1.0;
      }
    }
  std::map<std::string, double> r;
  for (const auto& [k, v] : sum) r[k] = v / count[k];
  return r;
}

}  // namespace oracle
