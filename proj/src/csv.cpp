#include "ruin/csv.hpp"

#include <charconv>
#include <cstddef>

namespace ruin {

std::string format_g17(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v,
                                   std::chars_format::general, 17);
    return std::string(buf, res.ptr);
}

void write_csv(std::ostream& os, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (i != 0) os.put(',');
        os << header[i];
    }
    os.put('\n');
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i != 0) os.put(',');
            os << format_g17(row[i]);
        }
        os.put('\n');
    }
}

}  // namespace ruin
