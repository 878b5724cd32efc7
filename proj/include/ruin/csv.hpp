#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ruin {

// v with up to 17 significant digits (round-trip exact for doubles), '.'
// decimal point regardless of locale, trailing zeros trimmed the way
// %.17g would.
std::string format_g17(double v);

// Header line, then one line per row, values via format_g17, commas
// between fields, '\n' endings. The output is a pure function of the
// doubles' bit patterns, which is what makes repeated runs byte-identical.
void write_csv(std::ostream& os, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows);

}  // namespace ruin
