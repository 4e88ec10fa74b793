// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bsa/bsa_layer.hpp"
#include "bsa/matrix.hpp"

namespace bsa {

// Checkpoint container, one file:
//
//   bsa-checkpoint v1\n
//   dtype float32|float64\n
//   tensor <name> <rank> <dim0> <dim1> <byte_offset>\n   (one line per tensor)
//   end\n
//   <raw values, little-endian, concatenated in manifest order>
//
// Offsets count bytes from the end of the manifest ("end\n" inclusive).
// Tensor names may not contain whitespace.

namespace detail {

template <class Real>
const char* dtype_name() {
    if constexpr (sizeof(Real) == 4)
        return "float32";
    else
        return "float64";
}

}  // namespace detail

template <class Real>
void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, Matrix<Real>*>>& tensors) {
    std::ostringstream manifest;
    manifest << "bsa-checkpoint v1\n";
    manifest << "dtype " << detail::dtype_name<Real>() << "\n";
    std::uint64_t offset = 0;
    for (const auto& [name, m] : tensors) {
        if (name.find_first_of(" \t\n") != std::string::npos)
            throw std::invalid_argument("checkpoint: tensor name contains whitespace: " + name);
        manifest << "tensor " << name << " 2 " << m->rows() << " " << m->cols() << " " << offset
                 << "\n";
        offset += std::uint64_t(m->size()) * sizeof(Real);
    }
    manifest << "end\n";

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    const std::string header = manifest.str();
    out.write(header.data(), std::streamsize(header.size()));
    for (const auto& [name, m] : tensors)
        out.write(reinterpret_cast<const char*>(m->data().data()),
                  std::streamsize(m->size() * sizeof(Real)));
    if (!out) throw std::runtime_error("checkpoint: write failed: " + path);
}

/// Loads into pre-shaped destination tensors; the manifest must list exactly
/// the same names with the same shapes, in any order.
template <class Real>
void load_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, Matrix<Real>*>>& tensors) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open: " + path);
    std::string line;
    if (!std::getline(in, line) || line != "bsa-checkpoint v1")
        throw std::runtime_error("checkpoint: bad magic in " + path);
    if (!std::getline(in, line))
        throw std::runtime_error("checkpoint: truncated header in " + path);
    {
        std::istringstream ls(line);
        std::string tag, dtype;
        ls >> tag >> dtype;
        if (tag != "dtype" || dtype != detail::dtype_name<Real>())
            throw std::runtime_error("checkpoint: dtype mismatch in " + path + " (" + line + ")");
    }

    struct Entry {
        std::size_t rows = 0, cols = 0;
        std::uint64_t offset = 0;
    };
    std::vector<std::pair<std::string, Entry>> listed;
    while (std::getline(in, line)) {
        if (line == "end") break;
        std::istringstream ls(line);
        std::string tag, name;
        int rank = 0;
        Entry e;
        ls >> tag >> name >> rank >> e.rows >> e.cols >> e.offset;
        if (!ls || tag != "tensor" || rank != 2)
            throw std::runtime_error("checkpoint: bad manifest line: " + line);
        listed.emplace_back(std::move(name), e);
    }
    if (line != "end") throw std::runtime_error("checkpoint: manifest missing end marker");
    if (listed.size() != tensors.size())
        throw std::runtime_error("checkpoint: tensor count mismatch");

    const std::streampos blob_start = in.tellg();
    for (const auto& [name, m] : tensors) {
        const Entry* found = nullptr;
        for (const auto& [lname, e] : listed)
            if (lname == name) {
                found = &e;
                break;
            }
        if (found == nullptr) throw std::runtime_error("checkpoint: missing tensor " + name);
        if (found->rows != m->rows() || found->cols != m->cols())
            throw std::runtime_error("checkpoint: shape mismatch for " + name);
        in.seekg(blob_start + std::streampos(found->offset));
        in.read(reinterpret_cast<char*>(m->data().data()),
                std::streamsize(m->size() * sizeof(Real)));
        if (!in) throw std::runtime_error("checkpoint: blob truncated at " + name);
    }
}

template <class Real>
void save_checkpoint(const std::string& path, ModelParams<Real>& params) {
    save_tensors(path, named_tensors(params));
}

template <class Real>
void load_checkpoint(const std::string& path, ModelParams<Real>& params) {
    load_tensors(path, named_tensors(params));
}

}  // namespace bsa
