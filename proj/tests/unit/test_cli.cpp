#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(STREAMLOD_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("streamlod_cli_" + name);
  fs::remove_all(p);
  return p;
}

const char* kTinySpec = R"({
  "seed": 2, "frames": 2, "width": 16, "height": 16,
  "cameras": {"count": 3, "radius": 4.0, "height": 0.5, "focal": 20, "held_out": [1]},
  "elements": [
    {"position": [0, 0, 0], "scale": 0.3, "color": [0.7, 0.3, 0.2], "opacity": 0.9,
     "velocity": [0, 0.1, 0], "points": 50}
  ]
})";

}  // namespace

TEST(Cli, MissingSpecIsUsageError) {
  EXPECT_EQ(run("gen /nonexistent/spec.json " + fresh_dir("unused").string()), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run(""), 2);
}

TEST(Cli, GenIsDeterministic) {
  const fs::path spec = fs::path(STREAMLOD_SOURCE_DIR) / "scenes" / "static_blob.json";
  const fs::path a = fresh_dir("gen_a"), b = fresh_dir("gen_b");
  ASSERT_EQ(run("gen " + spec.string() + " " + a.string()), 0);
  ASSERT_EQ(run("gen " + spec.string() + " " + b.string()), 0);
  EXPECT_FALSE(slurp(a / "manifest.txt").empty());
  EXPECT_EQ(slurp(a / "manifest.txt"), slurp(b / "manifest.txt"));
  EXPECT_EQ(slurp(a / "points.csv"), slurp(b / "points.csv"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Cli, TrainRenderEvalInspect) {
  const fs::path work = fresh_dir("e2e");
  fs::create_directories(work);
  {
    std::ofstream(work / "spec.json") << kTinySpec;
  }
  const fs::path scene = work / "scene", runp = work / "run";
  ASSERT_EQ(run("gen " + (work / "spec.json").string() + " " + scene.string()), 0);
  ASSERT_EQ(run("train " + scene.string() + " " + runp.string() +
                " --set train.init_epochs=5 --set train.stream_epochs=1 --set lod.delta=0.5"),
            0);
  EXPECT_TRUE(fs::exists(runp / "checkpoint.slod"));
  EXPECT_TRUE(fs::exists(runp / "stream" / "frame_0001.slrf"));

  const fs::path png = work / "view.png";
  EXPECT_EQ(run("render " + runp.string() + " --frame 1 --scene " + scene.string() + " --view 1 -o " + png.string()), 0);
  EXPECT_TRUE(fs::exists(png));
  EXPECT_NE(run("render " + runp.string() + " --frame 5 --scene " + scene.string() + " --view 1 -o " + png.string()), 0);

  const fs::path csv = work / "eval.csv";
  EXPECT_EQ(run("eval " + scene.string() + " " + runp.string() + " -o " + csv.string()), 0);
  EXPECT_EQ(slurp(csv).rfind("frame,view,psnr,ssim,bytes\n", 0), 0u);

  EXPECT_EQ(run("inspect " + runp.string()), 0);
  EXPECT_EQ(run("inspect " + (work / "missing.slrf").string()), 2);
  EXPECT_EQ(run("train " + scene.string() + " " + runp.string() + " --set bogus.key=1"), 2);
  fs::remove_all(work);
}
