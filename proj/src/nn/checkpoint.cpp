#include "mialab/nn/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mialab/common/error.hpp"

namespace mialab::nn {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

void save_checkpoint(const ModelState& model, const std::filesystem::path& path) {
    nlohmann::json header;
    header["config"] = model.config;
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& p : model.params) {
        header["tensors"].push_back({{"name", p.name}, {"shape", p.shape}, {"offset", offset}});
        offset += p.values.size() * 4;
    }
    const std::string header_text = header.dump();

    std::string blob(kCheckpointMagic, 4);
    blob.push_back(static_cast<char>(kCheckpointVersion));
    put_u32(blob, static_cast<std::uint32_t>(header_text.size()));
    blob += header_text;
    blob.reserve(blob.size() + offset);
    for (const auto& p : model.params)
        for (float v : p.values) put_u32(blob, std::bit_cast<std::uint32_t>(v));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

ModelState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string where = path.string() + ": ";

    if (bytes.size() < 9) throw FormatError(where + "file too short for a checkpoint header");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw FormatError(where + "bad magic");
    if (bytes[4] != kCheckpointVersion)
        throw FormatError(where + "unsupported format version " + std::to_string(bytes[4]));
    const std::uint32_t header_len = get_u32(bytes.data() + 5);
    if (9ULL + header_len > bytes.size()) throw FormatError(where + "truncated header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 9, bytes.begin() + 9 + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(where + "header is not valid JSON: " + e.what());
    }

    const unsigned char* payload = bytes.data() + 9 + header_len;
    const std::size_t payload_size = bytes.size() - 9 - header_len;

    ModelState model;
    try {
        model.config = header.at("config").get<ModelConfig>();
        std::size_t expected_offset = 0;
        for (const auto& t : header.at("tensors")) {
            Parameter p;
            p.name = t.at("name").get<std::string>();
            p.shape = t.at("shape").get<std::vector<std::size_t>>();
            const auto offset = t.at("offset").get<std::size_t>();
            std::size_t count = 1;
            for (auto s : p.shape) count *= s;
            if (offset != expected_offset)
                throw FormatError(where + "tensor '" + p.name + "' has offset " + std::to_string(offset) +
                                  ", expected " + std::to_string(expected_offset));
            if (offset + count * 4 > payload_size)
                throw FormatError(where + "tensor '" + p.name + "' advertises " + std::to_string(count) +
                                  " floats but the payload ends after " +
                                  std::to_string((payload_size - std::min(payload_size, offset)) / 4));
            p.values.resize(count);
            for (std::size_t k = 0; k < count; ++k)
                p.values[k] = std::bit_cast<float>(get_u32(payload + offset + 4 * k));
            expected_offset = offset + count * 4;
            model.params.push_back(std::move(p));
        }
        if (expected_offset != payload_size)
            throw FormatError(where + "payload has " + std::to_string(payload_size - expected_offset) +
                              " trailing bytes not described by the header");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(where + "malformed header: " + e.what());
    }
    try {
        model.validate();
    } catch (const ConfigError& e) {
        throw FormatError(where + e.what());
    } catch (const FormatError& e) {
        throw FormatError(where + e.what());
    }
    return model;
}

}  // namespace mialab::nn
