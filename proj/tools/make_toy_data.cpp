// Writes a small synthetic image set: root/<class>/<nnn>.png, one bright
// blob per image whose position depends on the class.

#include <CLI11.hpp>

#include <iostream>

#include "conmat/data.hpp"

int main(int argc, char** argv) {
  CLI::App app{"write a synthetic blob dataset"};
  std::string root;
  std::vector<std::string> names{"class0", "class1", "class2", "class3"};
  std::size_t per_class = 10, size = 32;
  std::uint64_t seed = 0;
  app.add_option("root", root, "output directory")->required();
  app.add_option("--names", names, "class names")->delimiter(',');
  app.add_option("--per-class", per_class, "images per class");
  app.add_option("--size", size, "image side in pixels");
  app.add_option("--seed", seed, "random seed");
  CLI11_PARSE(app, argc, argv);
  try {
    conmat::write_blob_dataset(root, names, per_class, size, seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  std::cout << "make_toy_data: " << names.size() * per_class << " images in " << names.size() << " classes -> " << root
            << std::endl;
  return 0;
}
