#include <gtest/gtest.h>

#include <unistd.h>

#include <opencv2/imgcodecs.hpp>

#include "polypflow/data.hpp"

using namespace pf;
namespace d = pf::data;
namespace fs = std::filesystem;

namespace {

class TempDir {
public:
    TempDir() {
        static int counter = 0;
        path_ = fs::temp_directory_path() /
                ("polypflow_data_test_" + std::to_string(::getpid()) + "_" +
                 std::to_string(counter++));
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

void write_gray_png(const fs::path& p, int size, int value) {
    cv::Mat img(size, size, CV_8UC1, cv::Scalar(value));
    ASSERT_TRUE(cv::imwrite(p.string(), img));
}

void make_pair_files(const fs::path& root, const std::string& stem, int size = 8,
                     int img_value = 128, int mask_value = 255) {
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    write_gray_png(root / "images" / (stem + ".png"), size, img_value);
    write_gray_png(root / "masks" / (stem + ".png"), size, mask_value);
}

std::vector<d::SampleRecord> synth_records(d::Dataset ds, int n) {
    std::vector<d::SampleRecord> out;
    for (int i = 0; i < n; ++i) {
        d::SampleRecord r;
        r.dataset = ds;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "img_%04d", i);
        r.basename = buf;
        out.push_back(r);
    }
    return out;
}

}  // namespace

TEST(Data, LoadDatasetPairsByStemSorted) {
    TempDir tmp;
    make_pair_files(tmp.path(), "b_second");
    make_pair_files(tmp.path(), "a_first");
    auto records = d::load_dataset(tmp.path(), d::Dataset::ETIS);
    ASSERT_EQ(records.size(), 2u);
    EXPECT_EQ(records[0].basename, "a_first");
    EXPECT_EQ(records[1].basename, "b_second");
    EXPECT_EQ(records[0].dataset, d::Dataset::ETIS);
}

TEST(Data, LoadDatasetErrors) {
    TempDir tmp;
    // missing directories
    EXPECT_THROW(d::load_dataset(tmp.path() / "nope", d::Dataset::ETIS), std::runtime_error);

    // empty dirs
    fs::create_directories(tmp.path() / "images");
    fs::create_directories(tmp.path() / "masks");
    EXPECT_THROW(d::load_dataset(tmp.path(), d::Dataset::ETIS), std::runtime_error);

    // orphan image names the offending file
    make_pair_files(tmp.path(), "ok");
    write_gray_png(tmp.path() / "images" / "orphan.png", 8, 10);
    try {
        d::load_dataset(tmp.path(), d::Dataset::ETIS);
        FAIL() << "expected runtime_error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("orphan.png"), std::string::npos) << e.what();
    }
}

TEST(Data, DatasetNamesRoundTrip) {
    using D = d::Dataset;
    for (D ds : {D::KvasirSEG, D::ClinicDB, D::ColonDB, D::Endoscene, D::ETIS})
        EXPECT_EQ(d::dataset_from_name(d::dataset_name(ds)), ds);
    EXPECT_EQ(d::dataset_from_name("CVC-ClinicDB"), D::ClinicDB);
    EXPECT_EQ(d::dataset_from_name("Kvasir-SEG"), D::KvasirSEG);
    EXPECT_EQ(d::dataset_from_name("unknown"), std::nullopt);
}

TEST(Data, SplitCardinalities) {
    auto recs = synth_records(d::Dataset::KvasirSEG, 1000);
    auto clinic = synth_records(d::Dataset::ClinicDB, 612);
    auto etis = synth_records(d::Dataset::ETIS, 30);
    recs.insert(recs.end(), clinic.begin(), clinic.end());
    recs.insert(recs.end(), etis.begin(), etis.end());

    auto split = d::make_splits(recs, 17);
    std::map<d::Dataset, std::map<d::Split, int>> counts;
    for (const auto& r : split) counts[r.dataset][r.split]++;
    EXPECT_EQ(counts[d::Dataset::KvasirSEG][d::Split::train], 900);
    EXPECT_EQ(counts[d::Dataset::KvasirSEG][d::Split::seen_test], 100);
    EXPECT_EQ(counts[d::Dataset::ClinicDB][d::Split::train], 550);
    EXPECT_EQ(counts[d::Dataset::ClinicDB][d::Split::seen_test], 62);
    EXPECT_EQ(counts[d::Dataset::ETIS][d::Split::unseen_test], 30);
    EXPECT_EQ(counts[d::Dataset::ETIS].size(), 1u);
}

TEST(Data, SplitDeterministicAndSeedSensitive) {
    auto recs = synth_records(d::Dataset::KvasirSEG, 1000);
    auto a = d::make_splits(recs, 17);
    auto b = d::make_splits(recs, 17);
    auto c = d::make_splits(recs, 18);
    bool same_ab = true, same_ac = true;
    for (std::size_t i = 0; i < a.size(); ++i) {
        same_ab = same_ab && a[i].split == b[i].split;
        same_ac = same_ac && a[i].split == c[i].split;
    }
    EXPECT_TRUE(same_ab);
    EXPECT_FALSE(same_ac);
}

TEST(Data, SplitIndependentAcrossDatasets) {
    // adding the ClinicDB pool must not perturb the Kvasir assignment
    auto kvasir_only = d::make_splits(synth_records(d::Dataset::KvasirSEG, 1000), 5);
    auto both_recs = synth_records(d::Dataset::KvasirSEG, 1000);
    auto clinic = synth_records(d::Dataset::ClinicDB, 612);
    both_recs.insert(both_recs.end(), clinic.begin(), clinic.end());
    auto both = d::make_splits(both_recs, 5);
    for (std::size_t i = 0; i < kvasir_only.size(); ++i)
        EXPECT_EQ(kvasir_only[i].split, both[i].split) << i;
}

TEST(Data, SplitCardinalityErrors) {
    auto recs = synth_records(d::Dataset::KvasirSEG, 999);
    EXPECT_THROW(d::make_splits(recs, 0), std::runtime_error);
    auto clinic = synth_records(d::Dataset::ClinicDB, 100);
    EXPECT_THROW(d::make_splits(clinic, 0), std::runtime_error);
}

TEST(Data, SplitCsvFormat) {
    TempDir tmp;
    auto recs = synth_records(d::Dataset::ETIS, 2);
    recs[0].split = d::Split::unseen_test;
    recs[1].split = d::Split::unseen_test;
    const fs::path out = tmp.path() / "splits.csv";
    d::write_split_csv(recs, out);
    std::ifstream in(out);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "dataset,basename,split");
    std::getline(in, line);
    EXPECT_EQ(line, "etis,img_0000,unseen_test");
}

TEST(Data, ImageDecodeScalesToUnitRange) {
    TempDir tmp;
    make_pair_files(tmp.path(), "x", 16, 128, 255);
    Tensor img = d::load_image_chw(tmp.path() / "images" / "x.png", 16);
    ASSERT_EQ(img.shape, (std::vector<int>{3, 16, 16}));
    for (double v : img.data) EXPECT_NEAR(v, 128.0 / 255.0, 1e-6);
}

TEST(Data, ImageResizeToTargetSize) {
    TempDir tmp;
    fs::create_directories(tmp.path());
    write_gray_png(tmp.path() / "big.png", 64, 200);
    Tensor img = d::load_image_chw(tmp.path() / "big.png", 32);
    EXPECT_EQ(img.shape, (std::vector<int>{3, 32, 32}));
    EXPECT_THROW(d::load_image_chw(tmp.path() / "missing.png", 32), std::runtime_error);
}

TEST(Data, MaskBinarization) {
    TempDir tmp;
    fs::create_directories(tmp.path());
    // gradient mask: values 0..255 across columns
    cv::Mat m(16, 16, CV_8UC1);
    for (int h = 0; h < 16; ++h)
        for (int w = 0; w < 16; ++w) m.at<std::uint8_t>(h, w) = static_cast<std::uint8_t>(w * 17);
    ASSERT_TRUE(cv::imwrite((tmp.path() / "m.png").string(), m));
    Tensor mask = d::load_mask_chw(tmp.path() / "m.png", 16);
    ASSERT_EQ(mask.shape, (std::vector<int>{1, 16, 16}));
    for (double v : mask.data) EXPECT_TRUE(v == 0.0 || v == 1.0);
    // 255*0.5 = 127.5: value 119 (w=7) stays background, 136 (w=8) foreground
    EXPECT_EQ(mask.at3(0, 0, 7), 0.0);
    EXPECT_EQ(mask.at3(0, 0, 8), 1.0);
}

TEST(Data, MakeBatchStacksPairs) {
    TempDir tmp;
    make_pair_files(tmp.path(), "a", 8, 60, 255);
    make_pair_files(tmp.path(), "b", 8, 200, 0);
    auto records = d::load_dataset(tmp.path(), d::Dataset::ColonDB);
    std::vector<const d::SampleRecord*> ptrs{&records[0], &records[1]};
    d::Batch batch = d::make_batch(ptrs, 8);
    EXPECT_EQ(batch.images.shape, (std::vector<int>{2, 3, 8, 8}));
    EXPECT_EQ(batch.masks.shape, (std::vector<int>{2, 1, 8, 8}));
    EXPECT_NEAR(batch.images.at4(0, 0, 0, 0), 60.0 / 255.0, 1e-6);
    EXPECT_NEAR(batch.images.at4(1, 0, 0, 0), 200.0 / 255.0, 1e-6);
    EXPECT_DOUBLE_EQ(batch.masks.at4(0, 0, 4, 4), 1.0);
    EXPECT_DOUBLE_EQ(batch.masks.at4(1, 0, 4, 4), 0.0);
    EXPECT_THROW(d::make_batch({}, 8), std::invalid_argument);
}

TEST(Data, AugmentKeepsMaskBinaryAndAligned) {
    std::mt19937 rng(3);
    Tensor img({3, 8, 8}), mask({1, 8, 8});
    std::mt19937 fill(4);
    std::uniform_int_distribution<int> coin(0, 1);
    for (auto& v : mask.data) v = coin(fill);
    for (int c = 0; c < 3; ++c)
        for (int h = 0; h < 8; ++h)
            for (int w = 0; w < 8; ++w) img.at3(c, h, w) = mask.at3(0, h, w);  // image mirrors mask
    for (int round = 0; round < 5; ++round) {
        d::augment_pair(img, mask, rng);
        for (double v : mask.data) EXPECT_TRUE(v == 0.0 || v == 1.0);
        // geometry applied jointly: the image still mirrors the mask
        for (int h = 0; h < 8; ++h)
            for (int w = 0; w < 8; ++w)
                EXPECT_DOUBLE_EQ(img.at3(0, h, w), mask.at3(0, h, w));
    }
}
