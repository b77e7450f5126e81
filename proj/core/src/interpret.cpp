#include "fbn/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

namespace fbn {

namespace fs = std::filesystem;

std::array<std::int64_t, 3> OcclusionConfig::stride() const {
    std::array<std::int64_t, 3> s{};
    for (int i = 0; i < 3; ++i)
        s[i] = static_cast<std::int64_t>(
            std::llround(static_cast<double>(mask_size[i]) * (1.0 - overlap)));
    return s;
}

void OcclusionConfig::validate(const std::array<std::int64_t, 3>& dims) const {
    if (overlap < 0.0 || overlap >= 1.0)
        raise(ErrorCode::ConfigError,
              "occlusion overlap must be in [0, 1), got " + std::to_string(overlap));
    if (smooth_sigma < 0.0)
        raise(ErrorCode::ConfigError, "occlusion smooth_sigma must be >= 0");
    const auto st = stride();
    for (int i = 0; i < 3; ++i) {
        if (mask_size[i] < 1)
            raise(ErrorCode::ConfigError, "occlusion mask_size must be >= 1 per axis");
        if (st[i] < 1)
            raise(ErrorCode::ConfigError,
                  "occlusion stride rounds to zero on axis " + std::to_string(i) +
                      "; shrink overlap or grow the mask");
        if (mask_size[i] > dims[i])
            raise(ErrorCode::ShapeError,
                  "occlusion mask " + std::to_string(mask_size[i]) +
                      " exceeds volume extent " + std::to_string(dims[i]) +
                      " on axis " + std::to_string(i));
    }
}

std::vector<std::int64_t> occlusion_grid(std::int64_t dim, std::int64_t mask,
                                         std::int64_t stride) {
    std::vector<std::int64_t> offs;
    for (std::int64_t p = 0;; p += stride) {
        if (p + mask >= dim) {
            offs.push_back(dim - mask);
            break;
        }
        offs.push_back(p);
    }
    return offs;
}

namespace {

double prob_of_class(const Tensor& logits, int cls) {
    const auto n = static_cast<int>(logits.shape[1]);
    if (cls < 0 || cls >= n)
        raise(ErrorCode::InvalidLabel,
              "occlusion target class " + std::to_string(cls) + " out of range for " +
                  std::to_string(n) + " classes");
    double m = logits.v[0];
    for (int j = 1; j < n; ++j) m = std::max(m, logits.v[j]);
    double denom = 0.0;
    for (int j = 0; j < n; ++j) denom += std::exp(logits.v[j] - m);
    return std::exp(logits.v[cls] - m) / denom;
}

struct Placement {
    std::int64_t z, y, x;
};

}  // namespace

double case_probability(Model& model, const Case& c, int cls) {
    Tensor batch = batch_from_cases({&c});
    Rng rng(0);
    const ModelOutput out = model.forward(batch, Mode::Eval, rng);
    return prob_of_class(out.logits, cls);
}

Volume occlusion_raw(Model& model, const Case& c, const OcclusionConfig& cfg,
                     int jobs) {
    if (!c.idh_label && !cfg.target)
        raise(ErrorCode::MissingLabel,
              "occlusion needs a labeled case (or an explicit target class): " + c.id);
    const auto dims = c.dims();
    cfg.validate(dims);
    if (jobs < 1) raise(ErrorCode::ConfigError, "jobs must be >= 1");
    const int target = cfg.target ? *cfg.target : *c.idh_label;

    const auto st = cfg.stride();
    const auto gz = occlusion_grid(dims[0], cfg.mask_size[0], st[0]);
    const auto gy = occlusion_grid(dims[1], cfg.mask_size[1], st[1]);
    const auto gx = occlusion_grid(dims[2], cfg.mask_size[2], st[2]);
    std::vector<Placement> places;
    places.reserve(gz.size() * gy.size() * gx.size());
    for (auto z : gz)
        for (auto y : gy)
            for (auto x : gx) places.push_back({z, y, x});

    const Tensor base = batch_from_cases({&c});
    std::array<double, 4> fill{};
    if (cfg.fill == FillPolicy::VolumeMean) {
        for (int ch = 0; ch < kNumSequences; ++ch) {
            double s = 0.0;
            for (float v : c.sequences[ch].voxels) s += v;
            fill[ch] = s / static_cast<double>(c.sequences[ch].numel());
        }
    }

    const std::int64_t nvox = dims[0] * dims[1] * dims[2];
    const auto vox_index = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
        return static_cast<std::size_t>((z * dims[1] + y) * dims[2] + x);
    };

    // placements covering each voxel; depends only on geometry
    std::vector<std::int32_t> cover(static_cast<std::size_t>(nvox), 0);
    for (const auto& p : places)
        for (std::int64_t z = p.z; z < p.z + cfg.mask_size[0]; ++z)
            for (std::int64_t y = p.y; y < p.y + cfg.mask_size[1]; ++y)
                for (std::int64_t x = p.x; x < p.x + cfg.mask_size[2]; ++x)
                    ++cover[vox_index(z, y, x)];

    const int workers = std::min<int>(jobs, static_cast<int>(places.size()));
    std::vector<std::vector<double>> partial(
        static_cast<std::size_t>(std::max(workers, 1)),
        std::vector<double>(static_cast<std::size_t>(nvox), 0.0));

    const auto run_span = [&](Model& m, int first, int step, std::vector<double>& sum) {
        Tensor batch = base;
        Rng rng(0);
        for (int i = first; i < static_cast<int>(places.size()); i += step) {
            const auto& p = places[static_cast<std::size_t>(i)];
            for (int ch = 0; ch < kNumSequences; ++ch)
                for (std::int64_t z = p.z; z < p.z + cfg.mask_size[0]; ++z)
                    for (std::int64_t y = p.y; y < p.y + cfg.mask_size[1]; ++y) {
                        const std::size_t row =
                            static_cast<std::size_t>(((ch * dims[0] + z) * dims[1] + y) *
                                                     dims[2]);
                        for (std::int64_t x = p.x; x < p.x + cfg.mask_size[2]; ++x)
                            batch.v[row + static_cast<std::size_t>(x)] = fill[ch];
                    }
            const ModelOutput out = m.forward(batch, Mode::Eval, rng);
            const double prob = prob_of_class(out.logits, target);
            for (std::int64_t z = p.z; z < p.z + cfg.mask_size[0]; ++z)
                for (std::int64_t y = p.y; y < p.y + cfg.mask_size[1]; ++y)
                    for (std::int64_t x = p.x; x < p.x + cfg.mask_size[2]; ++x)
                        sum[vox_index(z, y, x)] += prob;
            // put the occluded block back
            for (int ch = 0; ch < kNumSequences; ++ch)
                for (std::int64_t z = p.z; z < p.z + cfg.mask_size[0]; ++z)
                    for (std::int64_t y = p.y; y < p.y + cfg.mask_size[1]; ++y) {
                        const std::size_t row =
                            static_cast<std::size_t>(((ch * dims[0] + z) * dims[1] + y) *
                                                     dims[2]);
                        for (std::int64_t x = p.x; x < p.x + cfg.mask_size[2]; ++x)
                            batch.v[row + static_cast<std::size_t>(x)] =
                                base.v[row + static_cast<std::size_t>(x)];
                    }
        }
    };

    if (workers <= 1) {
        run_span(model, 0, 1, partial[0]);
    } else {
        // one replica per worker; layer caches are member state, so threads
        // cannot share the caller's instance
        std::vector<std::unique_ptr<Model>> replicas;
        const ParamRefs src = model.params();
        for (int w = 0; w < workers; ++w) {
            replicas.push_back(std::make_unique<Model>(model.config()));
            ParamRefs dst = replicas.back()->params();
            for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
        }
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&, w] { run_span(*replicas[static_cast<std::size_t>(w)],
                                                w, workers,
                                                partial[static_cast<std::size_t>(w)]); });
        for (auto& t : pool) t.join();
        for (int w = 1; w < workers; ++w)
            for (std::int64_t i = 0; i < nvox; ++i)
                partial[0][static_cast<std::size_t>(i)] +=
                    partial[static_cast<std::size_t>(w)][static_cast<std::size_t>(i)];
    }

    Volume raw(dims[0], dims[1], dims[2]);
    for (std::int64_t i = 0; i < nvox; ++i) {
        const auto k = static_cast<std::size_t>(i);
        raw.voxels[k] = static_cast<float>(partial[0][k] / cover[k]);
    }
    return raw;
}

namespace {

void blur_axis(std::vector<double>& v, const std::array<std::int64_t, 3>& dims,
               int axis, const std::vector<double>& kernel) {
    const std::int64_t radius = static_cast<std::int64_t>(kernel.size() / 2);
    const std::int64_t n = dims[axis];
    std::array<std::int64_t, 3> step{dims[1] * dims[2], dims[2], 1};
    std::vector<double> line(static_cast<std::size_t>(n));
    // iterate over all lines parallel to `axis`
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    for (std::int64_t i = 0; i < dims[a1]; ++i)
        for (std::int64_t j = 0; j < dims[a2]; ++j) {
            const std::int64_t off = i * step[a1] + j * step[a2];
            for (std::int64_t k = 0; k < n; ++k)
                line[static_cast<std::size_t>(k)] =
                    v[static_cast<std::size_t>(off + k * step[axis])];
            for (std::int64_t k = 0; k < n; ++k) {
                double acc = 0.0, wsum = 0.0;
                for (std::int64_t t = -radius; t <= radius; ++t) {
                    const std::int64_t s = k + t;
                    if (s < 0 || s >= n) continue;  // renormalize at the edge
                    const double w = kernel[static_cast<std::size_t>(t + radius)];
                    acc += w * line[static_cast<std::size_t>(s)];
                    wsum += w;
                }
                v[static_cast<std::size_t>(off + k * step[axis])] = acc / wsum;
            }
        }
}

}  // namespace

Volume gaussian_blur3(const Volume& v, double sigma) {
    if (sigma <= 0.0) return v;
    const auto radius = static_cast<std::int64_t>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    for (std::int64_t t = -radius; t <= radius; ++t)
        kernel[static_cast<std::size_t>(t + radius)] =
            std::exp(-0.5 * static_cast<double>(t * t) / (sigma * sigma));

    std::vector<double> work(v.voxels.begin(), v.voxels.end());
    for (int axis = 0; axis < 3; ++axis) blur_axis(work, v.dims, axis, kernel);

    Volume out = v;
    for (std::size_t i = 0; i < work.size(); ++i)
        out.voxels[i] = static_cast<float>(work[i]);
    return out;
}

Volume occlusion_postprocess(const Volume& raw, const OcclusionConfig& cfg,
                             double baseline_prob) {
    const Volume blurred = gaussian_blur3(raw, cfg.smooth_sigma);
    // drop in probability relative to the intact input; the constant baseline
    // shifts every voxel equally, so min-max output only depends on -raw
    std::vector<double> s(blurred.voxels.size());
    for (std::size_t i = 0; i < s.size(); ++i)
        s[i] = baseline_prob - static_cast<double>(blurred.voxels[i]);

    double mn = std::numeric_limits<double>::infinity(), mx = -mn;
    for (double x : s) {
        mn = std::min(mn, x);
        mx = std::max(mx, x);
    }
    Volume out = raw;
    const double span = mx - mn;
    if (!(span > 1e-12)) {
        std::fill(out.voxels.begin(), out.voxels.end(), 0.0f);
        return out;
    }
    for (std::size_t i = 0; i < s.size(); ++i)
        out.voxels[i] = static_cast<float>((s[i] - mn) / span);
    return out;
}

// --- PNG export --------------------------------------------------------------

namespace {

std::uint32_t crc32_bytes(const unsigned char* data, std::size_t n) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = 0xffffffffu;
    for (std::size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xffu] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

std::uint32_t adler32_bytes(const unsigned char* data, std::size_t n) {
    std::uint32_t a = 1, b = 0;
    for (std::size_t i = 0; i < n; ++i) {
        a = (a + data[i]) % 65521u;
        b = (b + a) % 65521u;
    }
    return (b << 16) | a;
}

void put_be32(std::string& s, std::uint32_t v) {
    s.push_back(static_cast<char>((v >> 24) & 0xff));
    s.push_back(static_cast<char>((v >> 16) & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
    s.push_back(static_cast<char>(v & 0xff));
}

void png_chunk(std::string& out, const char* type, const std::string& data) {
    put_be32(out, static_cast<std::uint32_t>(data.size()));
    std::string body = std::string(type) + data;
    out += body;
    put_be32(out, crc32_bytes(reinterpret_cast<const unsigned char*>(body.data()),
                              body.size()));
}

// 8-bit RGB, no compression (deflate stored blocks): tiny writer, zero deps
std::string encode_png_rgb(std::int64_t w, std::int64_t h,
                           const std::vector<unsigned char>& rgb) {
    std::string out("\x89PNG\r\n\x1a\n", 8);

    std::string ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(w));
    put_be32(ihdr, static_cast<std::uint32_t>(h));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type RGB
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter
    ihdr.push_back(0);   // interlace
    png_chunk(out, "IHDR", ihdr);

    // raw scanlines, filter byte 0 per row
    std::vector<unsigned char> scan;
    scan.reserve(static_cast<std::size_t>(h * (1 + 3 * w)));
    for (std::int64_t y = 0; y < h; ++y) {
        scan.push_back(0);
        const auto* row = &rgb[static_cast<std::size_t>(y * w * 3)];
        scan.insert(scan.end(), row, row + 3 * w);
    }

    std::string idat;
    idat.push_back(0x78);
    idat.push_back(0x01);
    std::size_t pos = 0;
    while (true) {
        const std::size_t len = std::min<std::size_t>(scan.size() - pos, 65535);
        const bool final = pos + len == scan.size();
        idat.push_back(final ? 1 : 0);  // stored block
        idat.push_back(static_cast<char>(len & 0xff));
        idat.push_back(static_cast<char>((len >> 8) & 0xff));
        idat.push_back(static_cast<char>(~len & 0xff));
        idat.push_back(static_cast<char>((~len >> 8) & 0xff));
        idat.append(reinterpret_cast<const char*>(scan.data() + pos),
                    static_cast<std::size_t>(len));
        pos += len;
        if (final) break;
    }
    put_be32(idat, adler32_bytes(scan.data(), scan.size()));
    png_chunk(out, "IDAT", idat);
    png_chunk(out, "IEND", "");
    return out;
}

void write_bytes(const fs::path& p, const void* data, std::size_t n) {
    std::ofstream f(p, std::ios::binary);
    if (!f) raise(ErrorCode::WriteError, "cannot open " + p.string());
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!f) raise(ErrorCode::WriteError, "short write to " + p.string());
}

// hot colormap: black -> red -> yellow -> white
std::array<double, 3> hot_color(double s) {
    const auto clamp01 = [](double x) { return std::min(1.0, std::max(0.0, x)); };
    return {clamp01(3.0 * s), clamp01(3.0 * s - 1.0), clamp01(3.0 * s - 2.0)};
}

}  // namespace

void export_overlay(const Volume& saliency, const Case& c, Sequence seq,
                    std::int64_t slice_index, double alpha,
                    const fs::path& out_png) {
    const auto dims = c.dims();
    if (saliency.dims != dims)
        raise(ErrorCode::ShapeError, "saliency dims do not match the case");
    if (slice_index < 0 || slice_index >= dims[0])
        raise(ErrorCode::IndexError,
              "slice " + std::to_string(slice_index) + " outside [0, " +
                  std::to_string(dims[0]) + ")");
    if (alpha < 0.0 || alpha > 1.0)
        raise(ErrorCode::ConfigError, "overlay alpha must be in [0, 1]");

    const Volume& anat = c.seq(seq);
    const std::int64_t H = dims[1], W = dims[2];

    // grayscale render normalized over the slice
    float mn = std::numeric_limits<float>::infinity(), mx = -mn;
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
            const float v = anat.at(slice_index, y, x);
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
    const double span = static_cast<double>(mx) - static_cast<double>(mn);

    std::vector<unsigned char> rgb(static_cast<std::size_t>(H * W * 3));
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
            const double g =
                span > 0.0 ? (anat.at(slice_index, y, x) - mn) / span : 0.0;
            const double s =
                std::min(1.0, std::max(0.0,
                    static_cast<double>(saliency.at(slice_index, y, x))));
            const double a = alpha * s;  // zero saliency stays transparent
            const auto color = hot_color(s);
            const std::size_t k = static_cast<std::size_t>((y * W + x) * 3);
            for (int ch = 0; ch < 3; ++ch)
                rgb[k + static_cast<std::size_t>(ch)] = static_cast<unsigned char>(
                    std::lround(255.0 * ((1.0 - a) * g + a * color[static_cast<std::size_t>(ch)])));
        }

    const std::string png = encode_png_rgb(W, H, rgb);
    fs::path dir = out_png.parent_path();
    if (dir.empty()) dir = ".";
    std::error_code ec;
    fs::create_directories(dir, ec);
    write_bytes(out_png, png.data(), png.size());

    // full saliency volume in the raw bundle convention
    write_bytes(dir / "saliency.raw", saliency.voxels.data(),
                saliency.voxels.size() * sizeof(float));
    nlohmann::json meta{{"name", "saliency"},
                        {"dims", {dims[0], dims[1], dims[2]}},
                        {"dtype", "float32-le"}};
    const std::string text = meta.dump(2) + "\n";
    write_bytes(dir / "saliency.json", text.data(), text.size());
}

}  // namespace fbn
