#include "attnlab/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "attnlab/binary_io.hpp"

namespace attnlab {

namespace binary {

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace binary

std::string encode_checkpoint(const DecoderParams& params) {
    const DecoderConfig& c = params.config();
    std::string out = "MBL1";
    for (std::size_t v : {c.layer_count, c.head_count, c.model_dim, c.feedforward_dim,
                          c.vocab_size, c.max_seq_len}) {
        binary::put_u32(out, static_cast<std::uint32_t>(v));
    }
    binary::put_u32(out, c.yes_token_id);
    binary::put_u32(out, c.no_token_id);
    out.reserve(out.size() + 4 * params.size());
    for (double v : params.values()) binary::put_f32(out, static_cast<float>(v));
    return out;
}

DecoderParams decode_checkpoint(const std::string& bytes) {
    binary::Reader in(bytes);
    in.expect_magic("MBL1");
    DecoderConfig c;
    c.layer_count = in.u32();
    c.head_count = in.u32();
    c.model_dim = in.u32();
    c.feedforward_dim = in.u32();
    c.vocab_size = in.u32();
    c.max_seq_len = in.u32();
    c.yes_token_id = in.u32();
    c.no_token_id = in.u32();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint header: ") + e.what());
    }
    DecoderParams params(c);
    for (double& v : params.values()) v = static_cast<double>(in.f32());
    if (!in.at_end()) throw FormatError("trailing bytes after checkpoint parameters");
    return params;
}

void save_checkpoint(const DecoderParams& params, const std::filesystem::path& path) {
    binary::write_file(path, encode_checkpoint(params));
}

DecoderParams load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(binary::read_file(path));
}

}  // namespace attnlab
