#include "g2a/common.hpp"

#include <charconv>

namespace g2a {

std::string format_exact(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw Error("format_exact: to_chars failed");
  return std::string(buf, end);
}

double parse_double(std::string_view token, std::string_view field, std::size_t line) {
  double v = 0.0;
  const char* first = token.data();
  const char* last = token.data() + token.size();
  if (!token.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last || token.empty())
    throw FormatError("field '" + std::string(field) + "': not a number: '" + std::string(token) + "'",
                      line);
  if (!std::isfinite(v))
    throw FormatError("field '" + std::string(field) + "': non-finite value", line);
  return v;
}

long long parse_int(std::string_view token, std::string_view field, std::size_t line) {
  long long v = 0;
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
  if (ec != std::errc{} || ptr != token.data() + token.size() || token.empty())
    throw FormatError("field '" + std::string(field) + "': not an integer: '" + std::string(token) + "'",
                      line);
  return v;
}

}  // namespace g2a
