#include "fbn/volume.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace fbn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<char> read_file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) raise(ErrorCode::CorruptBundle, "cannot open " + p.string());
    f.seekg(0, std::ios::end);
    const auto n = static_cast<std::size_t>(f.tellg());
    f.seekg(0);
    std::vector<char> bytes(n);
    if (n > 0) f.read(bytes.data(), static_cast<std::streamsize>(n));
    if (!f) raise(ErrorCode::CorruptBundle, "short read on " + p.string());
    return bytes;
}

void write_file_bytes(const fs::path& p, const void* data, std::size_t n) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) raise(ErrorCode::WriteError, "cannot open " + p.string() + " for writing");
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!f) raise(ErrorCode::WriteError, "short write on " + p.string());
}

}  // namespace

void validate_case(const Case& c) {
    const auto dims = c.dims();
    for (auto d : dims)
        if (d < 1) raise(ErrorCode::ShapeError, "case " + c.id + ": non-positive dims");
    for (int s = 0; s < kNumSequences; ++s) {
        const Volume& v = c.sequences[s];
        if (v.dims != dims)
            raise(ErrorCode::ShapeError, "case " + c.id + ": sequence dims differ");
        if (static_cast<std::int64_t>(v.voxels.size()) != v.numel())
            raise(ErrorCode::ShapeError, "case " + c.id + ": voxel count mismatch");
        for (float x : v.voxels)
            if (!std::isfinite(x))
                raise(ErrorCode::CorruptBundle, "case " + c.id + ": non-finite voxel");
    }
    if (c.mask) {
        if (c.mask->dims != dims)
            raise(ErrorCode::ShapeError, "case " + c.id + ": mask dims differ");
        for (float x : c.mask->voxels) {
            const float r = std::round(x);
            if (r != x || r < 0.0f || r > 3.0f)
                raise(ErrorCode::InvalidMask,
                      "case " + c.id + ": mask label " + std::to_string(x));
        }
    }
    if (c.idh_label && *c.idh_label != 0 && *c.idh_label != 1)
        raise(ErrorCode::InvalidLabel, "case " + c.id + ": idh_label must be 0 or 1");
}

Case load_case(const fs::path& dir) {
    const fs::path header_path = dir / "header.json";
    if (!fs::exists(header_path))
        raise(ErrorCode::CorruptBundle, "missing header.json in " + dir.string());

    json header;
    try {
        std::ifstream f(header_path);
        f >> header;
    } catch (const json::exception& e) {
        raise(ErrorCode::CorruptBundle, "unparsable header.json: " + std::string(e.what()));
    }

    Case c;
    try {
        c.id = header.at("id").get<std::string>();
        const auto dims = header.at("dims").get<std::vector<std::int64_t>>();
        const auto spacing = header.at("spacing").get<std::vector<double>>();
        if (dims.size() != 3 || spacing.size() != 3)
            raise(ErrorCode::CorruptBundle, "header dims/spacing must have 3 entries");
        for (auto d : dims)
            if (d < 1) raise(ErrorCode::CorruptBundle, "header dims must be >= 1");

        const std::int64_t n = dims[0] * dims[1] * dims[2];
        for (int s = 0; s < kNumSequences; ++s) {
            const fs::path raw = dir / (std::string(kSequenceNames[s]) + ".raw");
            if (!fs::exists(raw))
                raise(ErrorCode::MissingSequence,
                      std::string(kSequenceNames[s]) + ".raw missing in " + dir.string());
            auto bytes = read_file_bytes(raw);
            if (bytes.size() != static_cast<std::size_t>(n) * sizeof(float))
                raise(ErrorCode::CorruptBundle,
                      raw.string() + ": expected " + std::to_string(n * 4) + " bytes, got " +
                          std::to_string(bytes.size()));
            Volume& v = c.sequences[s];
            v.dims = {dims[0], dims[1], dims[2]};
            v.spacing = {spacing[0], spacing[1], spacing[2]};
            v.voxels.resize(static_cast<std::size_t>(n));
            std::memcpy(v.voxels.data(), bytes.data(), bytes.size());
        }

        if (header.at("has_mask").get<bool>()) {
            const fs::path raw = dir / "mask.raw";
            if (!fs::exists(raw))
                raise(ErrorCode::CorruptBundle, "has_mask set but mask.raw missing");
            auto bytes = read_file_bytes(raw);
            if (bytes.size() != static_cast<std::size_t>(n))
                raise(ErrorCode::CorruptBundle,
                      raw.string() + ": expected " + std::to_string(n) + " bytes, got " +
                          std::to_string(bytes.size()));
            Volume m(dims[0], dims[1], dims[2]);
            m.spacing = {spacing[0], spacing[1], spacing[2]};
            for (std::int64_t i = 0; i < n; ++i) {
                const auto label = static_cast<unsigned char>(bytes[static_cast<std::size_t>(i)]);
                if (label > 3)
                    raise(ErrorCode::InvalidMask,
                          "mask label " + std::to_string(int(label)) + " outside {0..3}");
                m.voxels[static_cast<std::size_t>(i)] = static_cast<float>(label);
            }
            c.mask = std::move(m);
        }

        if (!header.at("idh_label").is_null())
            c.idh_label = header.at("idh_label").get<int>();
    } catch (const json::exception& e) {
        raise(ErrorCode::CorruptBundle, "bad header.json field: " + std::string(e.what()));
    }

    validate_case(c);
    return c;
}

void write_case(const Case& c, const fs::path& dir) {
    validate_case(c);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) raise(ErrorCode::WriteError, "cannot create " + dir.string());

    const auto dims = c.dims();
    json header;
    header["id"] = c.id;
    header["dims"] = {dims[0], dims[1], dims[2]};
    header["spacing"] = {c.sequences[0].spacing[0], c.sequences[0].spacing[1],
                         c.sequences[0].spacing[2]};
    header["sequences"] = {"t1", "t1c", "t2", "flair"};
    header["has_mask"] = c.mask.has_value();
    if (c.idh_label)
        header["idh_label"] = *c.idh_label;
    else
        header["idh_label"] = nullptr;

    {
        std::ofstream f(dir / "header.json");
        if (!f) raise(ErrorCode::WriteError, "cannot write header.json");
        f << header.dump(2) << "\n";
        if (!f) raise(ErrorCode::WriteError, "short write on header.json");
    }

    for (int s = 0; s < kNumSequences; ++s) {
        const Volume& v = c.sequences[s];
        write_file_bytes(dir / (std::string(kSequenceNames[s]) + ".raw"), v.voxels.data(),
                         v.voxels.size() * sizeof(float));
    }
    if (c.mask) {
        std::vector<unsigned char> bytes(c.mask->voxels.size());
        for (std::size_t i = 0; i < bytes.size(); ++i)
            bytes[i] = static_cast<unsigned char>(std::lround(c.mask->voxels[i]));
        write_file_bytes(dir / "mask.raw", bytes.data(), bytes.size());
    }
}

Volume zscore_normalize(const Volume& v, NormalizeRegion region) {
    Volume out = v;
    double sum = 0.0, sum_sq = 0.0;
    std::int64_t count = 0;
    for (float x : v.voxels) {
        if (region == NormalizeRegion::NonzeroVoxels && x == 0.0f) continue;
        sum += x;
        sum_sq += static_cast<double>(x) * x;
        ++count;
    }
    if (count == 0) {
        std::fill(out.voxels.begin(), out.voxels.end(), 0.0f);
        return out;
    }
    const double mean = sum / static_cast<double>(count);
    const double var = sum_sq / static_cast<double>(count) - mean * mean;
    const double sd = std::sqrt(std::max(var, 0.0));
    if (sd < 1e-8) {
        std::fill(out.voxels.begin(), out.voxels.end(), 0.0f);
        return out;
    }
    // Statistics come from the region only, but the transform applies to every
    // voxel.
    for (std::size_t i = 0; i < out.voxels.size(); ++i)
        out.voxels[i] = static_cast<float>((v.voxels[i] - mean) / sd);
    return out;
}

namespace {

Volume pad_to_min(const Volume& v, const std::array<std::int64_t, 3>& size) {
    std::array<std::int64_t, 3> out_dims;
    std::array<std::int64_t, 3> lo;
    bool needs_pad = false;
    for (int a = 0; a < 3; ++a) {
        out_dims[a] = std::max(v.dims[a], size[a]);
        lo[a] = (out_dims[a] - v.dims[a]) / 2;
        needs_pad |= out_dims[a] != v.dims[a];
    }
    if (!needs_pad) return v;
    Volume out(out_dims[0], out_dims[1], out_dims[2]);
    out.spacing = v.spacing;
    for (std::int64_t z = 0; z < v.dims[0]; ++z)
        for (std::int64_t y = 0; y < v.dims[1]; ++y)
            for (std::int64_t x = 0; x < v.dims[2]; ++x)
                out.at(z + lo[0], y + lo[1], x + lo[2]) = v.at(z, y, x);
    return out;
}

Volume crop_window(const Volume& v, const std::array<std::int64_t, 3>& start,
                   const std::array<std::int64_t, 3>& size) {
    Volume out(size[0], size[1], size[2]);
    out.spacing = v.spacing;
    for (std::int64_t z = 0; z < size[0]; ++z)
        for (std::int64_t y = 0; y < size[1]; ++y)
            for (std::int64_t x = 0; x < size[2]; ++x)
                out.at(z, y, x) = v.at(z + start[0], y + start[1], x + start[2]);
    return out;
}

}  // namespace

Case crop_fixed(const Case& c, const std::array<std::int64_t, 3>& size) {
    Case padded = c;
    for (int s = 0; s < kNumSequences; ++s) padded.sequences[s] = pad_to_min(c.sequences[s], size);
    if (c.mask) padded.mask = pad_to_min(*c.mask, size);

    const auto dims = padded.dims();

    // Center on the tumor centroid when a nonempty mask exists, otherwise on
    // the volume center.
    std::array<double, 3> center{dims[0] / 2.0, dims[1] / 2.0, dims[2] / 2.0};
    if (padded.mask) {
        double cz = 0, cy = 0, cx = 0;
        std::int64_t n = 0;
        const Volume& m = *padded.mask;
        for (std::int64_t z = 0; z < dims[0]; ++z)
            for (std::int64_t y = 0; y < dims[1]; ++y)
                for (std::int64_t x = 0; x < dims[2]; ++x)
                    if (m.at(z, y, x) > 0.0f) {
                        cz += static_cast<double>(z);
                        cy += static_cast<double>(y);
                        cx += static_cast<double>(x);
                        ++n;
                    }
        if (n > 0)
            center = {cz / static_cast<double>(n), cy / static_cast<double>(n),
                      cx / static_cast<double>(n)};
    }

    std::array<std::int64_t, 3> start;
    for (int a = 0; a < 3; ++a) {
        auto s = static_cast<std::int64_t>(std::llround(center[a])) - size[a] / 2;
        start[a] = std::clamp<std::int64_t>(s, 0, dims[a] - size[a]);
    }

    Case out;
    out.id = padded.id;
    out.idh_label = padded.idh_label;
    for (int s = 0; s < kNumSequences; ++s)
        out.sequences[s] = crop_window(padded.sequences[s], start, size);
    if (padded.mask) out.mask = crop_window(*padded.mask, start, size);
    return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    fields.push_back(cur);
    return fields;
}

}  // namespace

Manifest load_manifest(const fs::path& csv_path) {
    std::ifstream f(csv_path);
    if (!f) raise(ErrorCode::CorruptBundle, "cannot open manifest " + csv_path.string());

    std::string line;
    if (!std::getline(f, line))
        raise(ErrorCode::CorruptBundle, "manifest is empty (header row required)");
    const auto header = split_csv_line(line);
    if (header.size() < 4 || header[0] != "case_id" || header[1] != "bundle_path" ||
        header[2] != "idh_label" || header[3] != "split_tag")
        raise(ErrorCode::CorruptBundle,
              "manifest header must be case_id,bundle_path,idh_label,split_tag");

    Manifest m;
    std::set<std::string> seen;
    while (std::getline(f, line)) {
        if (line.empty() || line == "\r") continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != 4)
            raise(ErrorCode::CorruptBundle, "manifest row with " +
                                                std::to_string(fields.size()) +
                                                " fields: " + line);
        ManifestRow row;
        row.case_id = fields[0];
        row.bundle_path = fields[1];
        if (!seen.insert(row.case_id).second)
            raise(ErrorCode::DuplicateCase, "duplicate case_id " + row.case_id);
        if (!fields[2].empty()) {
            if (fields[2] == "0")
                row.idh_label = 0;
            else if (fields[2] == "1")
                row.idh_label = 1;
            else
                raise(ErrorCode::InvalidLabel,
                      "idh_label '" + fields[2] + "' for case " + row.case_id);
        }
        row.split_tag = fields[3].empty() ? "unassigned" : fields[3];
        if (row.split_tag != "train" && row.split_tag != "val" && row.split_tag != "test" &&
            row.split_tag != "unassigned")
            raise(ErrorCode::InvalidLabel,
                  "split_tag '" + row.split_tag + "' for case " + row.case_id);
        m.rows.push_back(std::move(row));
    }
    return m;
}

void write_manifest(const Manifest& m, const fs::path& csv_path) {
    std::ofstream f(csv_path, std::ios::trunc);
    if (!f) raise(ErrorCode::WriteError, "cannot write manifest " + csv_path.string());
    f << "case_id,bundle_path,idh_label,split_tag\n";
    for (const auto& row : m.rows) {
        f << row.case_id << "," << row.bundle_path << ",";
        if (row.idh_label) f << *row.idh_label;
        f << "," << row.split_tag << "\n";
    }
    if (!f) raise(ErrorCode::WriteError, "short write on manifest");
}

}  // namespace fbn
