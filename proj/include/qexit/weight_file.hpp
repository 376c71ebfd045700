// Copyright (c) 2026, The qexit authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary weight file ("ENQE").
//
//   magic        4 bytes  "ENQE"
//   version      u16
//   config       u32 length + UTF-8 "key = value" lines (model subset + mode)
//   count        u32
//   directory    per tensor: u16 name length, name, u8 kind, u32 rows,
//                u32 cols, u32 block_size, u64 payload offset, u64 length
//   payloads     dense: f32 row-major
//                quantized: f32 scales, then codes (4-bit packed, element 2i
//                in the low nibble; 8-bit one byte per code)
//                lora_pair: A [rank x in] f32 then B [out x rank] f32;
//                block_size holds the rank
//   crc32        u32 over every preceding byte
//
// All integers and floats are little-endian. Offsets are from file start.
#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "qexit/errors.hpp"
#include "qexit/model.hpp"
#include "qexit/quantizer.hpp"

namespace qexit {

static_assert(std::endian::native == std::endian::little, "weight file I/O assumes a little-endian host");

inline constexpr char kWeightMagic[4] = {'E', 'N', 'Q', 'E'};
inline constexpr std::uint16_t kWeightVersion = 1;

enum class TensorKind : std::uint8_t { dense_f32 = 0, nf4 = 1, uniform4 = 2, uniform8 = 3, lora_pair = 4 };

inline TensorKind kind_for(QuantScheme s) {
    switch (s) {
        case QuantScheme::nf4: return TensorKind::nf4;
        case QuantScheme::uniform4: return TensorKind::uniform4;
        case QuantScheme::uniform8: return TensorKind::uniform8;
    }
    return TensorKind::nf4;
}

inline bool is_quantized_kind(TensorKind k) {
    return k == TensorKind::nf4 || k == TensorKind::uniform4 || k == TensorKind::uniform8;
}

inline QuantScheme scheme_for(TensorKind k) {
    switch (k) {
        case TensorKind::uniform4: return QuantScheme::uniform4;
        case TensorKind::uniform8: return QuantScheme::uniform8;
        default: return QuantScheme::nf4;
    }
}

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
    uLong c = crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        c = crc32(c, data, chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(c);
}

struct TensorEntry {
    std::string name;
    TensorKind kind = TensorKind::dense_f32;
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::uint32_t block_size = 0;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
};

struct WeightFileView {
    std::uint16_t version = 0;
    std::string config_text;
    std::vector<TensorEntry> tensors;
};

namespace detail {

class ByteWriter {
public:
    template <typename U>
    void put(U v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        buf_.insert(buf_.end(), p, p + sizeof(U));
    }
    void put_bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        buf_.insert(buf_.end(), p, p + n);
    }
    std::vector<std::uint8_t>& bytes() { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    ByteReader(const std::uint8_t* data, std::size_t n) : data_(data), n_(n) {}
    template <typename U>
    U get() {
        need(sizeof(U));
        U v;
        std::memcpy(&v, data_ + pos_, sizeof(U));
        pos_ += sizeof(U);
        return v;
    }
    std::string get_string(std::size_t len) {
        need(len);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), len);
        pos_ += len;
        return s;
    }
    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t k) const {
        if (pos_ + k > n_) throw DataError("weight file: truncated");
    }
    const std::uint8_t* data_;
    std::size_t n_;
    std::size_t pos_ = 0;
};

struct PendingTensor {
    TensorEntry entry;
    std::vector<std::uint8_t> payload;
};

template <typename T>
void append_f32(std::vector<std::uint8_t>& out, const Matrix<T>& m) {
    for (T v : m.data()) {
        const float f = static_cast<float>(v);
        const auto* p = reinterpret_cast<const std::uint8_t*>(&f);
        out.insert(out.end(), p, p + 4);
    }
}

template <typename T>
PendingTensor dense_tensor(const std::string& name, const Matrix<T>& m) {
    PendingTensor t;
    t.entry = {name, TensorKind::dense_f32, static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols()), 0, 0, 0};
    append_f32(t.payload, m);
    return t;
}

inline PendingTensor quant_tensor(const std::string& name, const QuantizedTensor& q) {
    PendingTensor t;
    t.entry = {name, kind_for(q.scheme), static_cast<std::uint32_t>(q.rows), static_cast<std::uint32_t>(q.cols),
               static_cast<std::uint32_t>(q.block_size), 0, 0};
    const auto* s = reinterpret_cast<const std::uint8_t*>(q.scales.data());
    t.payload.insert(t.payload.end(), s, s + q.scales.size() * 4);
    t.payload.insert(t.payload.end(), q.codes.begin(), q.codes.end());
    return t;
}

template <typename T>
PendingTensor lora_tensor(const std::string& name, const LoraAdapter<T>& ad) {
    PendingTensor t;
    t.entry = {name, TensorKind::lora_pair, static_cast<std::uint32_t>(ad.d_out()), static_cast<std::uint32_t>(ad.d_in()),
               static_cast<std::uint32_t>(ad.rank), 0, 0};
    append_f32(t.payload, ad.a);
    append_f32(t.payload, ad.b);
    return t;
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

/// Visits every tensor slot of a model in file order: f(name, slot) where
/// slot is one of the model's dense matrices or a projection.
template <typename M, typename Dense, typename Proj>
void visit_tensor_slots(M& m, Dense&& dense, Proj&& proj) {
    dense("embed.row_proj", m.embed.row_proj);
    dense("embed.row_bias", m.embed.row_bias);
    dense("embed.compass_proj", m.embed.compass_proj);
    dense("embed.compass_bias", m.embed.compass_bias);
    dense("embed.position", m.embed.position);
    dense("embed.readout", m.embed.readout);
    for (std::size_t l = 0; l < m.blocks.size(); ++l) {
        const std::string p = "block" + std::to_string(l + 1) + ".";
        auto& b = m.blocks[l];
        dense(p + "ln1_gain", b.ln1_gain);
        dense(p + "ln1_bias", b.ln1_bias);
        proj(p + "wq", b.wq);
        proj(p + "wk", b.wk);
        proj(p + "wv", b.wv);
        proj(p + "wo", b.wo);
        dense(p + "ln2_gain", b.ln2_gain);
        dense(p + "ln2_bias", b.ln2_bias);
        proj(p + "w1", b.w1);
        dense(p + "b1", b.b1);
        proj(p + "w2", b.w2);
        dense(p + "b2", b.b2);
    }
    auto head = [&](const std::string& p, auto& h) {
        dense(p + ".w1", h.w1);
        dense(p + ".b1", h.b1);
        dense(p + ".w2", h.w2);
        dense(p + ".b2", h.b2);
    };
    for (std::size_t k = 0; k < m.exit_heads.size(); ++k) head("exit" + std::to_string(m.config.exit_layers[k]), m.exit_heads[k]);
    head(std::string("final"), m.final_head);
}

}  // namespace detail

inline std::string model_config_text(const ModelConfig& c, ModelMode mode) {
    std::ostringstream o;
    char alpha[64];
    std::snprintf(alpha, sizeof alpha, "%.17g", c.lora_alpha);
    o << "num_layers = " << c.num_layers << '\n'
      << "d_model = " << c.d_model << '\n'
      << "num_heads = " << c.num_heads << '\n'
      << "d_ff = " << c.d_ff << '\n'
      << "exit_layers = " << detail::join_sizes(c.exit_layers) << '\n'
      << "action_count = " << c.action_count << '\n'
      << "exit_hidden = " << c.exit_hidden << '\n'
      << "window = " << c.window << '\n'
      << "lora_rank = " << c.lora_rank << '\n'
      << "lora_alpha = " << alpha << '\n'
      << "block_size = " << c.block_size << '\n'
      << "mode = " << (mode == ModelMode::quantized ? "quantized" : "full_precision") << '\n';
    return o.str();
}

inline std::pair<ModelConfig, ModelMode> parse_model_config_text(const std::string& text) {
    ModelConfig c;
    ModelMode mode = ModelMode::full_precision;
    std::istringstream in(text);
    std::string line;
    auto to_size = [](const std::string& v) { return static_cast<std::size_t>(std::stoull(v)); };
    try {
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto eq = line.find(" = ");
            if (eq == std::string::npos) throw DataError("weight file: malformed config line");
            const std::string k = line.substr(0, eq), v = line.substr(eq + 3);
            if (k == "num_layers") c.num_layers = to_size(v);
            else if (k == "d_model") c.d_model = to_size(v);
            else if (k == "num_heads") c.num_heads = to_size(v);
            else if (k == "d_ff") c.d_ff = to_size(v);
            else if (k == "exit_layers") {
                c.exit_layers.clear();
                std::istringstream items(v);
                std::string item;
                while (std::getline(items, item, ',')) c.exit_layers.push_back(to_size(item));
            } else if (k == "action_count") c.action_count = to_size(v);
            else if (k == "exit_hidden") c.exit_hidden = to_size(v);
            else if (k == "window") c.window = to_size(v);
            else if (k == "lora_rank") c.lora_rank = to_size(v);
            else if (k == "lora_alpha") c.lora_alpha = std::stod(v);
            else if (k == "block_size") c.block_size = to_size(v);
            else if (k == "mode") {
                if (v == "quantized") mode = ModelMode::quantized;
                else if (v == "full_precision") mode = ModelMode::full_precision;
                else throw DataError("weight file: unknown mode '" + v + "'");
            } else {
                throw DataError("weight file: unknown config key '" + k + "'");
            }
        }
    } catch (const std::logic_error&) {
        throw DataError("weight file: malformed config value");
    }
    try {
        c.validate();
    } catch (const StructuralError& e) {
        throw DataError(std::string("weight file: ") + e.what());
    }
    return {c, mode};
}

template <typename T>
std::vector<std::uint8_t> serialize_model(const MultiExitModel<T>& m) {
    std::vector<detail::PendingTensor> tensors;
    detail::visit_tensor_slots(
        m, [&](const std::string& name, const Matrix<T>& mat) { tensors.push_back(detail::dense_tensor(name, mat)); },
        [&](const std::string& name, const Linear<T>& lin) {
            if (lin.base) tensors.push_back(detail::quant_tensor(name, *lin.base));
            else tensors.push_back(detail::dense_tensor(name, lin.weight));
            if (lin.lora) tensors.push_back(detail::lora_tensor(name + ".lora", *lin.lora));
        });

    const std::string cfg = model_config_text(m.config, m.mode);
    std::size_t header = 4 + 2 + 4 + cfg.size() + 4;
    for (const auto& t : tensors) header += 2 + t.entry.name.size() + 1 + 4 * 3 + 8 * 2;
    std::uint64_t offset = header;
    for (auto& t : tensors) {
        t.entry.offset = offset;
        t.entry.length = t.payload.size();
        offset += t.payload.size();
    }

    detail::ByteWriter w;
    w.put_bytes(kWeightMagic, 4);
    w.put<std::uint16_t>(kWeightVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(cfg.size()));
    w.put_bytes(cfg.data(), cfg.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        w.put<std::uint16_t>(static_cast<std::uint16_t>(t.entry.name.size()));
        w.put_bytes(t.entry.name.data(), t.entry.name.size());
        w.put<std::uint8_t>(static_cast<std::uint8_t>(t.entry.kind));
        w.put<std::uint32_t>(t.entry.rows);
        w.put<std::uint32_t>(t.entry.cols);
        w.put<std::uint32_t>(t.entry.block_size);
        w.put<std::uint64_t>(t.entry.offset);
        w.put<std::uint64_t>(t.entry.length);
    }
    for (const auto& t : tensors) w.put_bytes(t.payload.data(), t.payload.size());
    auto& bytes = w.bytes();
    w.put<std::uint32_t>(crc32_of(bytes.data(), bytes.size()));
    return std::move(w.bytes());
}

/// Header and directory of a weight file; validates magic, version and checksum.
inline WeightFileView inspect_weight_file(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 + 2 + 4 + 4 + 4) throw DataError("weight file: too short");
    if (std::memcmp(bytes.data(), kWeightMagic, 4) != 0) throw DataError("weight file: bad magic");
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    if (stored != crc32_of(bytes.data(), bytes.size() - 4)) throw DataError("weight file: checksum mismatch");
    detail::ByteReader r(bytes.data(), bytes.size() - 4);
    r.get_string(4);
    WeightFileView v;
    v.version = r.get<std::uint16_t>();
    if (v.version != kWeightVersion) throw DataError("weight file: unsupported version");
    v.config_text = r.get_string(r.get<std::uint32_t>());
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        TensorEntry e;
        e.name = r.get_string(r.get<std::uint16_t>());
        const auto kind = r.get<std::uint8_t>();
        if (kind > static_cast<std::uint8_t>(TensorKind::lora_pair)) throw DataError("weight file: unknown tensor kind");
        e.kind = static_cast<TensorKind>(kind);
        e.rows = r.get<std::uint32_t>();
        e.cols = r.get<std::uint32_t>();
        e.block_size = r.get<std::uint32_t>();
        e.offset = r.get<std::uint64_t>();
        e.length = r.get<std::uint64_t>();
        if (e.offset + e.length > bytes.size() - 4 || e.offset < r.pos()) throw DataError("weight file: payload out of range");
        v.tensors.push_back(std::move(e));
    }
    return v;
}

namespace detail {

template <typename T>
Matrix<T> read_f32(const std::uint8_t* p, std::size_t rows, std::size_t cols) {
    Matrix<T> m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) {
        float f;
        std::memcpy(&f, p + 4 * i, 4);
        m[i] = static_cast<T>(f);
    }
    return m;
}

}  // namespace detail

template <typename T>
MultiExitModel<T> deserialize_model(std::span<const std::uint8_t> bytes) {
    const WeightFileView view = inspect_weight_file(bytes);
    const auto [cfg, mode] = parse_model_config_text(view.config_text);
    std::map<std::string, const TensorEntry*> by_name;
    for (const auto& e : view.tensors) {
        if (!by_name.emplace(e.name, &e).second) throw DataError("weight file: duplicate tensor '" + e.name + "'");
    }
    std::size_t used = 0;
    auto take = [&](const std::string& name) -> const TensorEntry* {
        auto it = by_name.find(name);
        if (it == by_name.end()) return nullptr;
        ++used;
        return it->second;
    };
    auto payload = [&](const TensorEntry& e) { return bytes.data() + e.offset; };
    auto read_dense = [&](const TensorEntry& e, std::size_t rows, std::size_t cols) {
        if (e.kind != TensorKind::dense_f32 || e.rows != rows || e.cols != cols || e.length != rows * cols * 4) {
            throw DataError("weight file: tensor '" + e.name + "' has unexpected kind or shape");
        }
        return detail::read_f32<T>(payload(e), rows, cols);
    };

    Rng unused_rng(0);
    MultiExitModel<T> m = init_model<T>(cfg, unused_rng);
    m.mode = mode;
    detail::visit_tensor_slots(
        m,
        [&](const std::string& name, Matrix<T>& mat) {
            const TensorEntry* e = take(name);
            if (!e) throw DataError("weight file: missing tensor '" + name + "'");
            mat = read_dense(*e, mat.rows(), mat.cols());
        },
        [&](const std::string& name, Linear<T>& lin) {
            const std::size_t rows = lin.weight.rows(), cols = lin.weight.cols();
            const TensorEntry* e = take(name);
            if (!e) throw DataError("weight file: missing tensor '" + name + "'");
            if (is_quantized_kind(e->kind)) {
                QuantizedTensor q;
                q.rows = e->rows;
                q.cols = e->cols;
                q.block_size = e->block_size;
                q.scheme = scheme_for(e->kind);
                if (q.rows != rows || q.cols != cols || q.block_size == 0) {
                    throw DataError("weight file: tensor '" + name + "' has unexpected shape");
                }
                const std::size_t nscale = q.num_blocks() * 4;
                if (e->length != nscale + q.code_bytes()) throw DataError("weight file: tensor '" + name + "' length mismatch");
                q.scales.resize(q.num_blocks());
                std::memcpy(q.scales.data(), payload(*e), nscale);
                q.codes.assign(payload(*e) + nscale, payload(*e) + e->length);
                q.validate();
                lin.base = std::move(q);
                lin.weight = Matrix<T>();
            } else {
                lin.weight = read_dense(*e, rows, cols);
            }
            if (const TensorEntry* le = take(name + ".lora")) {
                const std::size_t r = le->block_size;
                if (le->kind != TensorKind::lora_pair || le->rows != rows || le->cols != cols || r == 0 ||
                    le->length != (r * cols + rows * r) * 4) {
                    throw DataError("weight file: adapter '" + le->name + "' malformed");
                }
                LoraAdapter<T> ad;
                ad.rank = r;
                ad.alpha = cfg.lora_alpha;
                ad.a = detail::read_f32<T>(payload(*le), r, cols);
                ad.b = detail::read_f32<T>(payload(*le) + r * cols * 4, rows, r);
                lin.lora = std::move(ad);
            }
        });
    if (used != view.tensors.size()) throw DataError("weight file: unexpected extra tensors");
    return m;
}

/// Concatenated payloads of every quantized base tensor, in directory order.
inline std::vector<std::uint8_t> base_payload_bytes(std::span<const std::uint8_t> bytes) {
    const WeightFileView view = inspect_weight_file(bytes);
    std::vector<std::uint8_t> out;
    for (const auto& e : view.tensors) {
        if (!is_quantized_kind(e.kind)) continue;
        out.insert(out.end(), e.name.begin(), e.name.end());
        out.insert(out.end(), bytes.begin() + static_cast<std::ptrdiff_t>(e.offset),
                   bytes.begin() + static_cast<std::ptrdiff_t>(e.offset + e.length));
    }
    return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for '" + path + "'");
}

template <typename T>
void save_model(const std::string& path, const MultiExitModel<T>& m) {
    write_file_bytes(path, serialize_model(m));
}

template <typename T = float>
MultiExitModel<T> load_model(const std::string& path) {
    return deserialize_model<T>(read_file_bytes(path));
}

}  // namespace qexit
