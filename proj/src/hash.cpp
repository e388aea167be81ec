#include "dydet/hash.hpp"

#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <stdexcept>

#include <openssl/evp.h>

namespace dydet {

namespace {

class Sha1 {
 public:
  Sha1() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha1(), nullptr) != 1) {
      throw std::runtime_error("sha1: digest initialisation failed");
    }
  }
  void update(std::string_view bytes) {
    if (EVP_DigestUpdate(ctx_.get(), bytes.data(), bytes.size()) != 1) throw std::runtime_error("sha1: update failed");
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), md, &len) != 1) throw std::runtime_error("sha1: finalisation failed");
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out += kDigits[md[i] >> 4];
      out += kDigits[md[i] & 15];
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

}  // namespace

std::string sha1_hex(std::string_view bytes) {
  Sha1 h;
  h.update(bytes);
  return h.hex();
}

std::string git_blob_hash(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + file.string());
  const std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  Sha1 h;
  h.update("blob " + std::to_string(content.size()));
  h.update(std::string_view("\0", 1));
  h.update(content);
  return h.hex();
}

std::string content_hash(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (fs::is_regular_file(path)) return git_blob_hash(path);
  if (!fs::is_directory(path)) throw std::runtime_error("cannot hash missing path " + path.string());
  std::map<std::string, std::string> listing;
  for (const auto& entry : fs::recursive_directory_iterator(path)) {
    if (entry.is_regular_file()) {
      listing[fs::relative(entry.path(), path).generic_string()] = git_blob_hash(entry.path());
    }
  }
  std::string text;
  for (const auto& [name, hash] : listing) text += name + " " + hash + "\n";
  return sha1_hex(text);
}

}  // namespace dydet
