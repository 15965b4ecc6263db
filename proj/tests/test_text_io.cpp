#include "pbench/text_io.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "gtest_support.hpp"
#include "support.hpp"

using namespace pbench;

TEST(TextIo, SplitKeepsEmptyFields) {
  EXPECT_EQ(text::split("a\t\tb", '\t'), (std::vector<std::string>{"a", "", "b"}));
  EXPECT_EQ(text::split("", ','), (std::vector<std::string>{""}));
  EXPECT_EQ(text::split("x+y++z", "++"), (std::vector<std::string>{"x+y", "z"}));
}

TEST(TextIo, JoinInvertsSplit) {
  const std::vector<std::string> parts = {"drugA", "", "drugB"};
  EXPECT_EQ(text::split(text::join(parts, "|"), '|'), parts);
}

TEST(TextIo, FormatDoubleRoundTrips) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> exponent(-300, 300);
  for (int i = 0; i < 2000; ++i) {
    const double v = std::pow(10.0, exponent(rng)) * (i % 2 ? -1.0 : 1.0);
    EXPECT_EQ(text::parse_double(text::format_double(v), "v"), v);
  }
  EXPECT_EQ(text::format_double(0.1), "0.1");
  EXPECT_EQ(text::format_double(3.0), "3");
}

TEST(TextIo, ParseRejectsGarbage) {
  EXPECT_ERROR_CODE(text::parse_double("1.5x", "field"), ErrorCode::Format);
  EXPECT_ERROR_CODE(text::parse_double("", "field"), ErrorCode::Format);
  EXPECT_ERROR_CODE(text::parse_int("2.5", "field"), ErrorCode::Format);
  EXPECT_EQ(text::parse_int("-42", "field"), -42);
}

TEST(TextIo, WriteThenReadLines) {
  pbtest::TempDir tmp;
  const auto p = tmp.path / "f.txt";
  text::write_file(p, "one\r\ntwo\n");
  EXPECT_EQ(text::read_lines(p), (std::vector<std::string>{"one", "two"}));
  EXPECT_ERROR_CODE(text::read_lines(tmp.path / "missing.txt"), ErrorCode::Io);
}

TEST(TextIo, ErrorTokens) {
  EXPECT_EQ(error_code_name(ErrorCode::GeneMismatch), "E_GENE_MISMATCH");
  EXPECT_EQ(error_code_name(ErrorCode::Usage), "E_USAGE");
}
