#include "reldistill/dataset.hpp"

#include "reldistill/errors.hpp"
#include "reldistill/io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <unordered_map>

namespace rd::student {

namespace fs = std::filesystem;

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> rows) const {
    LabeledDataset out;
    out.inputs.resize(static_cast<Eigen::Index>(rows.size()), inputs.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.inputs.row(static_cast<Eigen::Index>(i)) = inputs.row(static_cast<Eigen::Index>(rows[i]));
        out.ids.push_back(ids[rows[i]]);
        out.labels.push_back(labels[rows[i]]);
        if (!groups.empty()) out.groups.push_back(groups[rows[i]]);
    }
    out.class_names = class_names;
    out.input = input;
    out.normalization = normalization;
    return out;
}

LabeledDataset load_vector_dataset(const fs::path& embeddings, const fs::path& labels_csv) {
    EmbeddingMatrix features = io::read_embeddings(embeddings, true);
    const io::CsvTable table = io::read_csv(labels_csv);
    const std::string origin = labels_csv.string();
    const std::size_t id_col = table.require_column("sample_id", origin);
    const std::size_t label_col = table.require_column("label", origin);
    const int group_col = table.column("group");

    std::unordered_map<std::string, std::pair<std::string, std::string>> by_id;
    std::set<std::string> classes;
    for (const auto& row : table.rows) {
        by_id[row[id_col]] = {row[label_col], group_col >= 0 ? row[static_cast<std::size_t>(group_col)] : ""};
        classes.insert(row[label_col]);
    }
    LabeledDataset ds;
    ds.class_names.assign(classes.begin(), classes.end());
    std::map<std::string, int> class_index;
    for (std::size_t c = 0; c < ds.class_names.size(); ++c) class_index[ds.class_names[c]] = static_cast<int>(c);

    ds.inputs = features.values();
    ds.ids = features.ids();
    for (const auto& id : ds.ids) {
        const auto it = by_id.find(id);
        if (it == by_id.end()) throw MissingSampleError(origin + ": no label for sample '" + id + "'");
        ds.labels.push_back(class_index.at(it->second.first));
        if (group_col >= 0) ds.groups.push_back(it->second.second);
    }
    ds.input = VectorInput{static_cast<int>(ds.inputs.cols())};
    return ds;
}

void write_vector_dataset(const fs::path& dir, const LabeledDataset& dataset) {
    fs::create_directories(dir);
    io::write_embeddings(dir / "features.emb", EmbeddingMatrix(dataset.inputs, dataset.ids), io::DType::fp32);
    io::CsvTable labels;
    labels.header = {"sample_id", "label"};
    if (!dataset.groups.empty()) labels.header.push_back("group");
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        std::vector<std::string> row = {dataset.ids[i], dataset.class_names[static_cast<std::size_t>(dataset.labels[i])]};
        if (!dataset.groups.empty()) row.push_back(dataset.groups[i]);
        labels.rows.push_back(std::move(row));
    }
    io::write_file_atomic(dir / "labels.csv", io::format_csv(labels));
}

InputNormalization channel_statistics(const Matrix& inputs, int channels) {
    InputNormalization norm;
    norm.mean.assign(static_cast<std::size_t>(channels), 0.0);
    norm.stddev.assign(static_cast<std::size_t>(channels), 1.0);
    if (inputs.size() == 0) return norm;
    std::vector<double> sum(static_cast<std::size_t>(channels), 0.0), sq(static_cast<std::size_t>(channels), 0.0);
    std::vector<double> count(static_cast<std::size_t>(channels), 0.0);
    for (Eigen::Index c = 0; c < inputs.cols(); ++c) {
        const auto ch = static_cast<std::size_t>(c % channels);
        sum[ch] += inputs.col(c).sum();
        sq[ch] += inputs.col(c).squaredNorm();
        count[ch] += static_cast<double>(inputs.rows());
    }
    for (std::size_t ch = 0; ch < sum.size(); ++ch) {
        const double mean = sum[ch] / count[ch];
        const double var = std::max(0.0, sq[ch] / count[ch] - mean * mean);
        norm.mean[ch] = mean;
        norm.stddev[ch] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
    return norm;
}

LabeledDataset load_image_folder(const fs::path& root, const ImageInput& size) {
    if (!fs::is_directory(root)) throw IOError(root.string() + ": not a directory");
    if (size.channels != 1 && size.channels != 3) throw ConfigError("image datasets support 1 or 3 channels");
    static const std::set<std::string> kExtensions = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp", ".ppm", ".pgm"};

    std::vector<std::string> classes;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (entry.is_directory()) classes.push_back(entry.path().filename().string());
    }
    std::sort(classes.begin(), classes.end());
    if (classes.empty()) throw ConfigError(root.string() + ": no class directories");

    std::vector<std::pair<fs::path, int>> files;
    for (std::size_t c = 0; c < classes.size(); ++c) {
        std::vector<fs::path> found;
        for (const auto& entry : fs::directory_iterator(root / classes[c])) {
            std::string ext = entry.path().extension().string();
            std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
            if (entry.is_regular_file() && kExtensions.contains(ext)) found.push_back(entry.path());
        }
        std::sort(found.begin(), found.end());
        for (auto& f : found) files.emplace_back(std::move(f), static_cast<int>(c));
    }

    LabeledDataset ds;
    ds.class_names = classes;
    ds.input = size;
    const Eigen::Index width = static_cast<Eigen::Index>(size.height) * size.width * size.channels;
    ds.inputs.resize(static_cast<Eigen::Index>(files.size()), width);
    for (std::size_t i = 0; i < files.size(); ++i) {
        const auto& [path, label] = files[i];
        cv::Mat img = cv::imread(path.string(), size.channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
        if (img.empty()) throw IOError(path.string() + ": cannot decode image");
        if (size.channels == 3) cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
        if (img.rows != size.height || img.cols != size.width) {
            cv::resize(img, img, cv::Size(size.width, size.height), 0, 0, cv::INTER_AREA);
        }
        img.convertTo(img, CV_64F, 1.0 / 255.0);
        const auto* data = img.ptr<double>(0);
        for (Eigen::Index k = 0; k < width; ++k) ds.inputs(static_cast<Eigen::Index>(i), k) = data[k];
        ds.ids.push_back(classes[static_cast<std::size_t>(label)] + "/" + path.filename().string());
        ds.labels.push_back(label);
    }
    ds.normalization = channel_statistics(ds.inputs, size.channels);
    return ds;
}

namespace {

void augment_image(Eigen::RowVectorXd& row, const ImageInput& img, const AugmentationConfig& cfg, Rng& rng) {
    const int h = img.height, w = img.width, ch = img.channels;
    auto at = [&](const Eigen::RowVectorXd& src, int y, int x, int c) {
        return src(static_cast<Eigen::Index>((y * w + x) * ch + c));
    };
    Eigen::RowVectorXd src = row;
    const bool hflip = cfg.flips && rng.bernoulli(0.5);
    const bool vflip = cfg.flips && rng.bernoulli(0.5);
    const double angle = cfg.max_rotation_deg > 0.0 ? rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) * M_PI / 180.0 : 0.0;
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            // inverse-map the output pixel, nearest neighbour, clamp to edge
            const double dy = y - cy, dx = x - cx;
            double sy = cy + ca * dy + sa * dx;
            double sx = cx - sa * dy + ca * dx;
            int iy = std::clamp(static_cast<int>(std::lround(sy)), 0, h - 1);
            int ix = std::clamp(static_cast<int>(std::lround(sx)), 0, w - 1);
            if (vflip) iy = h - 1 - iy;
            if (hflip) ix = w - 1 - ix;
            for (int c = 0; c < ch; ++c) row(static_cast<Eigen::Index>((y * w + x) * ch + c)) = at(src, iy, ix, c);
        }
    }
    if (!cfg.color_jitter) return;
    const double b = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness);
    const double k = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast);
    const double s = 1.0 + rng.uniform(-cfg.saturation, cfg.saturation);
    const double hue = rng.uniform(-cfg.hue, cfg.hue) * 2.0 * M_PI;
    row *= b;
    const double mean = row.mean();
    row = ((row.array() - mean) * k + mean).matrix();
    if (ch == 3) {
        const double ch_cos = std::cos(hue), ch_sin = std::sin(hue);
        for (int p = 0; p < h * w; ++p) {
            double r = row(3 * p), g = row(3 * p + 1), bl = row(3 * p + 2);
            // YIQ: luma kept, chroma scaled by saturation and rotated by hue
            const double yl = 0.299 * r + 0.587 * g + 0.114 * bl;
            double i = 0.596 * r - 0.274 * g - 0.322 * bl;
            double q = 0.211 * r - 0.523 * g + 0.312 * bl;
            const double i2 = s * (ch_cos * i - ch_sin * q);
            const double q2 = s * (ch_sin * i + ch_cos * q);
            row(3 * p) = yl + 0.956 * i2 + 0.621 * q2;
            row(3 * p + 1) = yl - 0.272 * i2 - 0.647 * q2;
            row(3 * p + 2) = yl - 1.106 * i2 + 1.703 * q2;
        }
    }
    row = row.cwiseMax(0.0).cwiseMin(1.0);
}

}  // namespace

Matrix augment(const Matrix& inputs, const InputSpec& spec, const AugmentationConfig& config, Rng& rng) {
    if (!config.enabled) return inputs;
    Matrix out = inputs;
    if (std::holds_alternative<VectorInput>(spec)) {
        if (config.vector_noise > 0.0) out += rng.normal_matrix(out.rows(), out.cols(), config.vector_noise);
        return out;
    }
    const auto& img = std::get<ImageInput>(spec);
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        Eigen::RowVectorXd row = out.row(i);
        augment_image(row, img, config, rng);
        out.row(i) = row;
    }
    return out;
}

Split group_split(const LabeledDataset& dataset, double fraction, std::uint64_t seed) {
    std::vector<std::string> groups;
    std::map<std::string, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        auto [it, fresh] = members.try_emplace(dataset.group_of(i));
        if (fresh) groups.push_back(it->first);
        it->second.push_back(i);
    }
    std::sort(groups.begin(), groups.end());
    Rng rng(seed);
    rng.shuffle(groups);
    std::size_t n_val = fraction > 0.0 ? static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(groups.size()))) : 0;
    if (groups.size() < 2) n_val = 0;
    n_val = std::min(n_val, groups.size() - (groups.empty() ? 0 : 1));
    Split split;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        auto& target = g < n_val ? split.val : split.train;
        for (std::size_t i : members[groups[g]]) target.push_back(i);
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    return split;
}

}  // namespace rd::student
