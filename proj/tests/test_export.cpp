#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "attempt/io/export.hpp"

using namespace attempt;

namespace {

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

}  // namespace

TEST_CASE("instance attention csv has id, task, and one column per weight") {
  const std::string path = "/tmp/attempt_export_inst.csv";
  std::vector<std::string> tasks{"rev", "rev", "sortish"};
  std::vector<std::vector<double>> attn{
      {0.5, 0.25, 0.25}, {0.1, 0.7, 0.2}, {0.3, 0.3, 0.4}};
  write_instance_attention_csv(path, tasks, attn, {"copy", "sort", "target"});

  auto lines = read_lines(path);
  REQUIRE(lines.size() == 4);
  REQUIRE(lines[0] == "instance_id,task_id,copy,sort,target");
  for (std::size_t i = 0; i < 3; ++i) {
    auto f = split_csv(lines[i + 1]);
    REQUIRE(f.size() == 5);  // t+3 columns for t+1 weights
    REQUIRE(f[0] == std::to_string(i));
    REQUIRE(f[1] == tasks[i]);
    for (std::size_t j = 0; j < 3; ++j)
      REQUIRE(std::stod(f[2 + j]) == Catch::Approx(attn[i][j]).margin(1e-9));
  }
  std::remove(path.c_str());

  REQUIRE_THROWS_AS(
      write_instance_attention_csv(path, {"a"}, {{0.5, 0.5}}, {"x"}),
      DimensionError);
}

TEST_CASE("mean attention csv enforces probability rows") {
  const std::string path = "/tmp/attempt_export_mean.csv";
  write_mean_attention_csv(path, {"t1", "t2"}, {"s1", "s2", "tgt"},
                           {{0.2, 0.3, 0.5}, {0.6, 0.1, 0.3}});
  auto lines = read_lines(path);
  REQUIRE(lines.size() == 3);
  auto f = split_csv(lines[2]);
  REQUIRE(f[0] == "t2");
  double s = 0;
  for (int j = 1; j <= 3; ++j) s += std::stod(f[j]);
  REQUIRE(s == Catch::Approx(1.0).margin(1e-6));
  std::remove(path.c_str());

  REQUIRE_THROWS_MATCHES(
      write_mean_attention_csv(path, {"t"}, {"a", "b"}, {{0.8, 0.3}}),
      NumericError,
      Catch::Matchers::MessageMatches(
          Catch::Matchers::ContainsSubstring("sums to")));
}

TEST_CASE("svg heatmap cells darken monotonically with weight") {
  const std::string path = "/tmp/attempt_export_heat.svg";
  std::vector<std::vector<double>> m{{0.0, 0.25, 0.75}, {1.0, 0.5, 0.5}};
  write_attention_svg(path, {"r1", "r2"}, {"c1", "c2", "c3"}, m);

  std::ifstream in(path);
  std::string svg((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  REQUIRE(svg.find("<svg") != std::string::npos);
  REQUIRE(svg.find("r2") != std::string::npos);
  REQUIRE(svg.find("c3") != std::string::npos);

  // collect cell fills in writing order (row-major over the matrix)
  std::vector<int> grays;
  std::size_t pos = 0;
  while ((pos = svg.find("fill=\"rgb(", pos)) != std::string::npos) {
    pos += 10;
    grays.push_back(std::stoi(svg.substr(pos)));
  }
  REQUIRE(grays.size() == 6);
  std::vector<double> flat{0.0, 0.25, 0.75, 1.0, 0.5, 0.5};
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      if (flat[i] < flat[j]) REQUIRE(grays[i] > grays[j]);  // lighter
      if (flat[i] == flat[j]) REQUIRE(grays[i] == grays[j]);
    }
  REQUIRE(grays[3] == 0);    // weight 1 is black
  REQUIRE(grays[0] == 255);  // weight 0 is white
  std::remove(path.c_str());
}
