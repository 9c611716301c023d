#include "pairforge/io.hpp"

#include "pairforge/rng.hpp"
#include "pairforge/types.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <iomanip>
#include <sstream>

namespace pairforge {

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(Errc::IoError, "cannot open " + path.string());
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

void write_file(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::IoError, "cannot write " + path.string());
    out << content;
    if (!out) fail(Errc::IoError, "short write to " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) fail(Errc::MalformedRecord, "invalid JSON in " + path.string());
    return j;
}

void for_each_line(const std::filesystem::path& path,
                   const std::function<void(std::size_t, const std::string&)>& fn) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(Errc::IoError, "cannot open " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        fn(line_no, line);
    }
}

std::string digest_bytes(std::string_view bytes) {
    std::ostringstream out;
    out << "fnv1a64:" << std::hex << std::setw(16) << std::setfill('0') << hash64(bytes);
    return out.str();
}

std::string digest_file(const std::filesystem::path& path) {
    return digest_bytes(read_file(path));
}

}  // namespace pairforge
