#include "mismatch/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "mismatch/errors.hpp"
#include "mismatch/rng.hpp"

namespace mismatch::data {

std::string_view to_string(SyntheticKind kind) {
  return kind == SyntheticKind::tubes ? "tubes" : "blobs";
}

SyntheticKind parse_synthetic_kind(std::string_view name) {
  if (name == "tubes") return SyntheticKind::tubes;
  if (name == "blobs") return SyntheticKind::blobs;
  throw ParameterError("unknown synthetic kind '" + std::string(name) + "'");
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::labelled_train: return "labelled_train";
    case Split::unlabelled_train: return "unlabelled_train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "unknown";
}

Split parse_split(std::string_view name) {
  for (auto s : {Split::labelled_train, Split::unlabelled_train, Split::validation, Split::test}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown split '" + std::string(name) + "'");
}

void CaseSet::validate() const {
  std::set<std::size_t> seen;
  for (const auto& list : splits) {
    for (auto i : list) {
      if (i >= cases.size()) throw ConfigError("split references missing case " + std::to_string(i));
      if (!seen.insert(i).second) throw ConfigError("case " + cases[i].case_id + " is in two splits");
    }
  }
  for (auto i : indices(Split::labelled_train)) {
    if (!cases[i].labelled) {
      throw ConfigError("labelled-train case " + cases[i].case_id + " is not marked labelled");
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic generation

namespace {

using Plane = std::vector<double>;

void stamp_disc(Plane& mask, std::size_t size, double cx, double cy, double r) {
  const long lo_y = std::max(0L, static_cast<long>(std::floor(cy - r)));
  const long hi_y = std::min(static_cast<long>(size) - 1, static_cast<long>(std::ceil(cy + r)));
  const long lo_x = std::max(0L, static_cast<long>(std::floor(cx - r)));
  const long hi_x = std::min(static_cast<long>(size) - 1, static_cast<long>(std::ceil(cx + r)));
  for (long y = lo_y; y <= hi_y; ++y) {
    for (long x = lo_x; x <= hi_x; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx;
      const double dy = static_cast<double>(y) + 0.5 - cy;
      if (dx * dx + dy * dy <= r * r) mask[static_cast<std::size_t>(y) * size + x] = 1.0;
    }
  }
}

void draw_tubes(Plane& mask, std::size_t size, std::mt19937_64& rng) {
  const double s = static_cast<double>(size);
  std::uniform_int_distribution<int> count(1, 3);
  std::uniform_real_distribution<double> coord(0.0, s);
  std::uniform_real_distribution<double> radius(1.0, 3.0);
  const int n = count(rng);
  for (int t = 0; t < n; ++t) {
    // Cubic Bezier between two random points, control points anywhere.
    std::array<double, 8> p{};
    for (auto& v : p) v = coord(rng);
    const double r = radius(rng);
    const int steps = static_cast<int>(8 * size);
    for (int k = 0; k <= steps; ++k) {
      const double u = static_cast<double>(k) / steps, w = 1.0 - u;
      const double b0 = w * w * w, b1 = 3 * w * w * u, b2 = 3 * w * u * u, b3 = u * u * u;
      const double x = b0 * p[0] + b1 * p[2] + b2 * p[4] + b3 * p[6];
      const double y = b0 * p[1] + b1 * p[3] + b2 * p[5] + b3 * p[7];
      stamp_disc(mask, size, x, y, r);
    }
  }
}

void draw_blobs(Plane& mask, std::size_t size, std::mt19937_64& rng) {
  const double s = static_cast<double>(size);
  std::uniform_int_distribution<int> count(1, 2);
  std::uniform_real_distribution<double> centre(0.25 * s, 0.75 * s);
  std::uniform_real_distribution<double> axis(0.08 * s, 0.25 * s);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  const int n = count(rng);
  for (int b = 0; b < n; ++b) {
    const double cx = centre(rng), cy = centre(rng);
    const double ax = axis(rng), ay = axis(rng), rot = angle(rng);
    std::array<double, 3> amp{}, phase{};
    for (int k = 0; k < 3; ++k) {
      amp[k] = 0.08 * jitter(rng);
      phase[k] = angle(rng);
    }
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - cx;
        const double dy = static_cast<double>(y) + 0.5 - cy;
        const double u = (dx * std::cos(rot) + dy * std::sin(rot)) / ax;
        const double v = (-dx * std::sin(rot) + dy * std::cos(rot)) / ay;
        const double phi = std::atan2(v, u);
        double limit = 1.0;
        for (int k = 0; k < 3; ++k) limit += amp[k] * std::sin((k + 2) * phi + phase[k]);
        if (std::sqrt(u * u + v * v) <= limit) mask[y * size + x] = 1.0;
      }
    }
  }
}

}  // namespace

Case gen_synthetic_case(std::uint64_t seed, SyntheticKind kind, std::size_t slices,
                        std::size_t size, double noise_sigma) {
  if (size == 0 || size % 4 != 0) {
    throw ParameterError("slice size must be a positive multiple of 4, got " + std::to_string(size));
  }
  if (slices == 0) throw ParameterError("a case needs at least one slice");
  if (noise_sigma < 0.0) throw ParameterError("noise sigma must be non-negative");

  const std::size_t plane = size * size;
  std::vector<double> image(slices * plane), mask(slices * plane);
  for (std::size_t s = 0; s < slices; ++s) {
    std::mt19937_64 rng(derive_seed(seed, s));
    Plane m(plane, 0.0);
    // Re-draw until the slice has foreground.
    while (std::none_of(m.begin(), m.end(), [](double v) { return v > 0.0; })) {
      if (kind == SyntheticKind::tubes) {
        draw_tubes(m, size, rng);
      } else {
        draw_blobs(m, size, rng);
      }
    }
    std::normal_distribution<double> noise(0.0, noise_sigma > 0.0 ? noise_sigma : 1.0);
    for (std::size_t i = 0; i < plane; ++i) {
      mask[s * plane + i] = m[i];
      image[s * plane + i] = m[i] + (noise_sigma > 0.0 ? noise(rng) : 0.0);
    }
  }
  Case c;
  char id[32];
  std::snprintf(id, sizeof(id), "synthetic_%016llx", static_cast<unsigned long long>(seed));
  c.case_id = id;
  c.image = Tensor({slices, 1, size, size}, std::move(image));
  c.mask = Tensor({slices, 1, size, size}, std::move(mask));
  c.labelled = true;
  return c;
}

Case casewise_normalize(const Case& c) {
  const std::size_t S = c.image.dim(0), C = c.image.dim(1), HW = c.image.dim(2) * c.image.dim(3);
  const auto in = c.image.data();
  std::vector<double> out(in.begin(), in.end());
  const double n = static_cast<double>(S * HW);
  for (std::size_t ch = 0; ch < C; ++ch) {
    double mean = 0.0;
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t i = 0; i < HW; ++i) mean += in[(s * C + ch) * HW + i];
    }
    mean /= n;
    double var = 0.0;
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t i = 0; i < HW; ++i) {
        const double d = in[(s * C + ch) * HW + i] - mean;
        var += d * d;
      }
    }
    const double sd = std::max(std::sqrt(var / n), 1e-8);
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t i = 0; i < HW; ++i) {
        auto& v = out[(s * C + ch) * HW + i];
        v = (v - mean) / sd;
      }
    }
  }
  Case r = c;
  r.image = Tensor(c.image.shape(), std::move(out));
  return r;
}

Tensor slice_of(const Tensor& volume, std::size_t index) {
  if (volume.rank() != 4) throw DimensionError("expected an S x C x H x W volume");
  if (index >= volume.dim(0)) throw DimensionError("slice index out of range");
  const std::size_t len = volume.dim(1) * volume.dim(2) * volume.dim(3);
  const auto src = volume.data().subspan(index * len, len);
  return Tensor({volume.dim(1), volume.dim(2), volume.dim(3)},
                std::vector<double>(src.begin(), src.end()));
}

std::array<Tensor, 4> crop_corners(const Tensor& slice, std::size_t crop) {
  if (slice.rank() != 3) throw DimensionError("crop_corners expects a C x H x W slice");
  const std::size_t C = slice.dim(0), H = slice.dim(1), W = slice.dim(2);
  if (crop == 0 || crop > H || crop > W) {
    throw DimensionError("crop " + std::to_string(crop) + " does not fit slice " +
                         ad::to_string(slice.shape()));
  }
  const std::array<std::pair<std::size_t, std::size_t>, 4> origins{
      {{0, 0}, {0, W - crop}, {H - crop, 0}, {H - crop, W - crop}}};
  std::array<Tensor, 4> out;
  const auto src = slice.data();
  for (std::size_t k = 0; k < 4; ++k) {
    const auto [oy, ox] = origins[k];
    std::vector<double> patch;
    patch.reserve(C * crop * crop);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t y = 0; y < crop; ++y) {
        const auto row = src.subspan((c * H + oy + y) * W + ox, crop);
        patch.insert(patch.end(), row.begin(), row.end());
      }
    }
    out[k] = Tensor({C, crop, crop}, std::move(patch));
  }
  return out;
}

std::vector<std::size_t> filter_foreground(const Case& c, std::size_t min_pixels) {
  const std::size_t S = c.mask.dim(0), len = c.mask.numel() / S;
  const auto m = c.mask.data();
  std::vector<std::size_t> keep;
  for (std::size_t s = 0; s < S; ++s) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < len; ++i) count += m[s * len + i] > 0.5 ? 1 : 0;
    if (count > min_pixels) keep.push_back(s);
  }
  return keep;
}

// ---------------------------------------------------------------------------
// Samples and streams

std::vector<Sample> split_samples(const CaseSet& set, Split split, const SampleOptions& options,
                                  bool filter) {
  std::vector<Sample> out;
  for (auto ci : set.indices(split)) {
    const Case normalised = casewise_normalize(set.cases.at(ci));
    std::vector<std::size_t> slices;
    if (filter) {
      slices = filter_foreground(normalised, options.min_foreground);
    } else {
      slices.resize(normalised.slices());
      for (std::size_t s = 0; s < slices.size(); ++s) slices[s] = s;
    }
    for (auto s : slices) {
      const Tensor image = slice_of(normalised.image, s);
      const Tensor mask = slice_of(normalised.mask, s);
      const std::string id = normalised.case_id + "/s" + std::to_string(s);
      if (options.crop == 0) {
        out.push_back({id, image, mask});
        continue;
      }
      const auto ip = crop_corners(image, options.crop);
      const auto mp = crop_corners(mask, options.crop);
      for (std::size_t k = 0; k < 4; ++k) {
        out.push_back({id + "/c" + std::to_string(k), ip[k], mp[k]});
      }
    }
  }
  return out;
}

Batch make_batch(const std::vector<const Sample*>& samples, bool with_mask) {
  if (samples.empty()) throw ContractError("empty batch");
  const auto& first = *samples.front();
  const std::size_t N = samples.size();
  std::vector<double> image, mask;
  Batch b;
  for (const auto* s : samples) {
    if (s->image.shape() != first.image.shape()) throw DimensionError("ragged batch");
    image.insert(image.end(), s->image.data().begin(), s->image.data().end());
    if (with_mask) mask.insert(mask.end(), s->mask.data().begin(), s->mask.data().end());
    b.ids.push_back(s->id);
  }
  const auto& is = first.image.shape();
  b.image = Tensor({N, is[0], is[1], is[2]}, std::move(image));
  if (with_mask) b.mask = Tensor({N, 1, is[1], is[2]}, std::move(mask));
  return b;
}

namespace {

void apply_augment(Batch& b, const Augment& aug, std::mt19937_64& rng) {
  if (!aug.enabled()) return;
  const std::size_t N = b.image.dim(0), C = b.image.dim(1), H = b.image.dim(2), W = b.image.dim(3);
  auto img = b.image.mutable_data();
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> noise(0.0, aug.noise_sigma > 0.0 ? aug.noise_sigma : 1.0);
  for (std::size_t n = 0; n < N; ++n) {
    if (aug.flip && coin(rng)) {
      auto flip_rows = [W](std::span<double> plane, std::size_t rows) {
        for (std::size_t y = 0; y < rows; ++y) std::reverse(plane.begin() + y * W, plane.begin() + (y + 1) * W);
      };
      flip_rows(img.subspan(n * C * H * W, C * H * W), C * H);
      if (b.mask.defined()) flip_rows(b.mask.mutable_data().subspan(n * H * W, H * W), H);
    }
    if (aug.noise_sigma > 0.0) {
      for (auto& v : img.subspan(n * C * H * W, C * H * W)) v += noise(rng);
    }
  }
}

}  // namespace

LabelledStream::LabelledStream(std::vector<Sample> samples, std::size_t batch_size, Augment augment,
                               std::uint64_t seed)
    : samples_(std::move(samples)), batch_size_(batch_size), augment_(augment), rng_(seed) {
  if (samples_.empty()) throw ConfigError("labelled stream has no samples");
  if (batch_size_ == 0) throw ConfigError("batch size must be at least 1");
}

Batch LabelledStream::next() {
  std::vector<const Sample*> picks;
  for (std::size_t i = 0; i < batch_size_; ++i) {
    picks.push_back(&samples_[cursor_]);
    cursor_ = (cursor_ + 1) % samples_.size();
  }
  Batch b = make_batch(picks, true);
  apply_augment(b, augment_, rng_);
  return b;
}

UnlabelledStream::UnlabelledStream(std::vector<Sample> samples, std::size_t batch_size,
                                   Augment augment, std::uint64_t seed)
    : samples_(std::move(samples)),
      batch_size_(batch_size),
      augment_(augment),
      rng_(seed),
      aug_rng_(derive_seed(seed, 1)) {
  if (samples_.empty()) throw ConfigError("unlabelled stream has no samples");
  if (batch_size_ == 0) throw ConfigError("batch size must be at least 1");
  order_.resize(samples_.size());
  reshuffle();
}

void UnlabelledStream::reshuffle() {
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

std::size_t UnlabelledStream::batches_per_epoch() const {
  return (samples_.size() + batch_size_ - 1) / batch_size_;
}

Batch UnlabelledStream::next() {
  if (cursor_ >= order_.size()) {
    ++epoch_;
    reshuffle();
  }
  std::vector<const Sample*> picks;
  while (picks.size() < batch_size_ && cursor_ < order_.size()) {
    picks.push_back(&samples_[order_[cursor_++]]);
  }
  Batch b = make_batch(picks, false);
  apply_augment(b, augment_, aug_rng_);
  return b;
}

Streams make_streams(const CaseSet& set, std::size_t labelled_slices, std::uint64_t seed,
                     const StreamOptions& options) {
  set.validate();
  if (labelled_slices == 0) throw ConfigError("labelled budget must be at least 1 slice");
  auto pool = split_samples(set, Split::labelled_train, options.sampling, true);
  if (labelled_slices > pool.size()) {
    throw ConfigError("labelled budget " + std::to_string(labelled_slices) + " exceeds the " +
                      std::to_string(pool.size()) + " available labelled samples");
  }
  std::mt19937_64 pick(derive_seed(seed, 100));
  std::vector<std::size_t> idx(pool.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), pick);
  idx.resize(labelled_slices);
  std::sort(idx.begin(), idx.end());
  std::vector<Sample> chosen;
  for (auto i : idx) chosen.push_back(pool[i]);

  Streams s;
  s.labelled = LabelledStream(std::move(chosen), options.batch_size, options.augment,
                              derive_seed(seed, 101));

  auto unlabelled = split_samples(set, Split::unlabelled_train, options.sampling, false);
  if (options.unlabelled_slices > 0) {
    if (options.unlabelled_slices > unlabelled.size()) {
      throw ConfigError("unlabelled budget exceeds the available unlabelled samples");
    }
    std::vector<std::size_t> u(unlabelled.size());
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = i;
    std::shuffle(u.begin(), u.end(), pick);
    u.resize(options.unlabelled_slices);
    std::sort(u.begin(), u.end());
    std::vector<Sample> kept;
    for (auto i : u) kept.push_back(unlabelled[i]);
    unlabelled = std::move(kept);
  }
  if (!unlabelled.empty()) {
    s.unlabelled = UnlabelledStream(std::move(unlabelled), options.batch_size, options.augment,
                                    derive_seed(seed, 102));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Tensor container

namespace {

constexpr std::string_view kTensorMagic = "MMTENS01";

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const unsigned char> b, std::size_t& off) {
  if (off + 4 > b.size()) throw FormatError("truncated tensor header", off);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[off + i]) << (8 * i);
  off += 4;
  return v;
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

std::vector<unsigned char> encode_tensor(const Tensor& t) {
  std::vector<unsigned char> out(kTensorMagic.begin(), kTensorMagic.end());
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

Tensor decode_tensor(std::span<const unsigned char> bytes) {
  if (bytes.size() < kTensorMagic.size() ||
      !std::equal(kTensorMagic.begin(), kTensorMagic.end(), bytes.begin())) {
    throw FormatError("bad tensor magic", 0);
  }
  std::size_t off = kTensorMagic.size();
  const std::uint32_t rank = get_u32(bytes, off);
  if (rank == 0) throw FormatError("tensor rank must be positive", off - 4);
  ad::Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = get_u32(bytes, off);
    if (d == 0) throw FormatError("zero tensor dimension", off - 4);
    shape.push_back(d);
  }
  const std::size_t n = ad::numel(shape);
  if (bytes.size() - off < 4 * n) throw FormatError("truncated tensor payload", bytes.size());
  if (bytes.size() - off > 4 * n) throw FormatError("trailing bytes after tensor payload", off + 4 * n);
  std::vector<double> values(n);
  for (auto& v : values) v = static_cast<double>(std::bit_cast<float>(get_u32(bytes, off)));
  return Tensor(std::move(shape), std::move(values));
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  write_file(path, encode_tensor(t));
}

Tensor read_tensor(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return decode_tensor(bytes);
}

// ---------------------------------------------------------------------------
// Manifest

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "# mismatch case manifest\n# path\tlabelled\tsplit\n";
  for (const auto& e : entries) {
    out << e.path << '\t' << (e.labelled ? 1 : 0) << '\t' << to_string(e.split) << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t lineno = 0, offset = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t start = offset;
    offset += line.size() + 1;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    ManifestEntry e;
    int labelled = -1;
    std::string split;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    if (!(fields >> e.path >> labelled >> split) || (labelled != 0 && labelled != 1)) {
      throw FormatError(where + "malformed manifest line", start);
    }
    e.labelled = labelled == 1;
    try {
      e.split = parse_split(split);
    } catch (const Error&) {
      throw FormatError(where + "unknown split '" + split + "'", start);
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_case(const std::filesystem::path& stem, const Case& c) {
  write_tensor(stem.string() + ".image.mmt", c.image);
  write_tensor(stem.string() + ".mask.mmt", c.mask);
}

CaseSet load_caseset(const std::filesystem::path& manifest) {
  const auto entries = read_manifest(manifest);
  const auto dir = manifest.parent_path();
  CaseSet set;
  for (const auto& e : entries) {
    const auto stem = (dir / e.path).string();
    Case c;
    c.case_id = e.path;
    c.image = read_tensor(stem + ".image.mmt");
    c.mask = read_tensor(stem + ".mask.mmt");
    c.labelled = e.labelled;
    if (c.image.rank() != 4 || c.mask.rank() != 4 || c.image.dim(0) != c.mask.dim(0) ||
        c.image.dim(2) != c.mask.dim(2) || c.image.dim(3) != c.mask.dim(3) || c.mask.dim(1) != 1) {
      throw DataError("case " + e.path + " has inconsistent image/mask shapes");
    }
    set.indices(e.split).push_back(set.cases.size());
    set.cases.push_back(std::move(c));
  }
  set.validate();
  return set;
}

}  // namespace mismatch::data
