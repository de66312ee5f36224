// Writes a synthetic five-class shape dataset to a ppds file, mainly for
// exercising the command-line tool on reproducible data.
#include <CLI11.hpp>

#include <iostream>
#include <string>

#include "protopart/data_io.hpp"
#include "protopart/errors.hpp"
#include "synthetic_data.hpp"

int main(int argc, char** argv) {
  CLI::App app{"synthetic shape dataset generator"};
  std::string out_path, split = "train";
  int per_class = 20;
  unsigned int seed = 0;
  app.add_option("--out", out_path, "ppds file to write")->required();
  app.add_option("--per-class", per_class, "images per class");
  app.add_option("--seed", seed, "generator seed");
  app.add_option("--split", split, "split tag stored in memory only");
  CLI11_PARSE(app, argc, argv);

  try {
    protopart::Dataset data =
        protopart::testing::synthetic_shapes(per_class, seed, split);
    protopart::save_ppds(data, out_path);
    std::cout << "images=" << data.size() << " classes=" << data.class_count()
              << " saved=" << out_path << "\n";
  } catch (const protopart::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
