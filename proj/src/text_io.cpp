#include "pbench/text_io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <system_error>

#include "pbench/error.hpp"

namespace pbench {

std::string_view error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::Usage: return "E_USAGE";
    case ErrorCode::Config: return "E_CONFIG";
    case ErrorCode::Io: return "E_IO";
    case ErrorCode::Format: return "E_FORMAT";
    case ErrorCode::Dimension: return "E_DIMENSION";
    case ErrorCode::Invalid: return "E_INVALID";
    case ErrorCode::UnknownName: return "E_UNKNOWN_NAME";
    case ErrorCode::MissingControl: return "E_MISSING_CONTROL";
    case ErrorCode::GeneMismatch: return "E_GENE_MISMATCH";
    case ErrorCode::Unsatisfiable: return "E_UNSATISFIABLE";
    case ErrorCode::NonFinite: return "E_NON_FINITE";
    case ErrorCode::Empty: return "E_EMPTY";
  }
  return "E_UNKNOWN";
}

namespace text {

std::vector<std::string> split(std::string_view line, char delimiter) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delimiter, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(line.substr(start));
      return out;
    }
    out.emplace_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

std::vector<std::string> split(std::string_view line, std::string_view delimiter) {
  if (delimiter.empty()) return {std::string(line)};
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delimiter, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(line.substr(start));
      return out;
    }
    out.emplace_back(line.substr(start, pos - start));
    start = pos + delimiter.size();
  }
}

std::string join(const std::vector<std::string>& parts, std::string_view delimiter) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out += delimiter;
    out += parts[i];
  }
  return out;
}

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view token, std::string_view context) {
  if (token == "nan") return std::nan("");
  if (token == "inf") return HUGE_VAL;
  if (token == "-inf") return -HUGE_VAL;
  double value = 0.0;
  const char* first = token.data();
  if (!token.empty() && token.front() == '+') ++first;
  const auto res = std::from_chars(first, token.data() + token.size(), value);
  if (res.ec != std::errc() || res.ptr != token.data() + token.size() || token.empty()) {
    throw Error(ErrorCode::Format,
                "cannot parse number '" + std::string(token) + "' in " + std::string(context));
  }
  return value;
}

long long parse_int(std::string_view token, std::string_view context) {
  long long value = 0;
  const auto res = std::from_chars(token.data(), token.data() + token.size(), value);
  if (res.ec != std::errc() || res.ptr != token.data() + token.size() || token.empty()) {
    throw Error(ErrorCode::Format,
                "cannot parse integer '" + std::string(token) + "' in " + std::string(context));
  }
  return value;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  if (in.bad()) throw Error(ErrorCode::Io, "read failure on " + path.string());
  return lines;
}

void write_file(const std::filesystem::path& path, std::string_view content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw Error(ErrorCode::Io, "write failure on " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(ErrorCode::Io, "cannot write " + path.string());
  }
}

}  // namespace text
}  // namespace pbench
