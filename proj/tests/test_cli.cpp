// SPDX-License-Identifier: Apache-2.0
//
// Exercises the installed binary the way a user would: spawn it, capture
// files and exit codes, parse the CSV it writes.
#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#ifndef BSA_CLI_PATH
#error "BSA_CLI_PATH must point at the command-line binary"
#endif

namespace {

struct RunResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run_counter = 0;

RunResult run_cli(const std::string& args, const std::string& env_prefix = "") {
    const std::string tag = std::to_string(++run_counter);
    const std::string out_path = "cli_stdout_" + tag + ".txt";
    const std::string err_path = "cli_stderr_" + tag + ".txt";
    const std::string cmd = env_prefix + std::string(BSA_CLI_PATH) + " " + args + " >" +
                            out_path + " 2>" + err_path;
    const int raw = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.out = slurp(out_path);
    r.err = slurp(err_path);
    std::remove(out_path.c_str());
    std::remove(err_path.c_str());
    return r;
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) lines.push_back(line);
    return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::istringstream in(line);
    std::string cell;
    while (std::getline(in, cell, ',')) cells.push_back(cell);
    return cells;
}

}  // namespace

TEST_CASE("invalid configs exit with the dedicated status and one parseable line") {
    // block length that does not divide the ball size
    const auto r = run_cli("flops --n 256 --ball-size 64 --block-len 7");
    REQUIRE(r.exit_code == 2);
    const auto errs = lines_of(r.err);
    REQUIRE(errs.size() == 1);
    REQUIRE(errs[0].rfind("error code=invalid-config msg=\"", 0) == 0);
    REQUIRE(errs[0].back() == '"');
    REQUIRE(r.out.empty());

    // an unknown variant is rejected at parse time with the same contract
    const auto r2 = run_cli("flops --variant nonsense");
    REQUIRE(r2.exit_code == 2);
    REQUIRE(lines_of(r2.err).size() == 1);

    // top-k larger than the candidate set once the own ball is masked
    const auto r3 = run_cli("flops --n 512 --ball-size 256 --block-len 8 --top-k 33");
    REQUIRE(r3.exit_code == 2);
    REQUIRE(lines_of(r3.err)[0].find("invalid-config") != std::string::npos);
}

TEST_CASE("flops emits key=value text for one variant and CSV for several") {
    const auto r = run_cli("flops --n 4096 --depth 18 --variant bsa");
    REQUIRE(r.exit_code == 0);
    REQUIRE(r.out.find("n=4096\n") != std::string::npos);
    REQUIRE(r.out.find("variant=bsa\n") != std::string::npos);
    REQUIRE(r.out.find("total=") != std::string::npos);

    const auto multi =
        run_cli("flops --n 4096 --depth 18 --variant bsa-gc --variant bsa "
                "--variant bsa-nogroup --variant full");
    REQUIRE(multi.exit_code == 0);
    const auto rows = lines_of(multi.out);
    REQUIRE(rows.size() == 5);
    REQUIRE(rows[0].rfind("n,variant,", 0) == 0);
    // totals come back in the order requested: gc < bsa < nogroup < full
    std::vector<double> totals;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto cells = split_csv(rows[i]);
        totals.push_back(std::stod(cells.back()));
    }
    REQUIRE(totals.size() == 4);
    REQUIRE(totals[0] < totals[1]);
    REQUIRE(totals[1] < totals[2]);
    REQUIRE(totals[2] < totals[3]);
}

TEST_CASE("environment variables stand in for flags, flags win") {
    const auto env_run = run_cli("flops", "BSA_N=128 BSA_DEPTH=3 BSA_VARIANT=full ");
    REQUIRE(env_run.exit_code == 0);
    REQUIRE(env_run.out.find("n=128\n") != std::string::npos);
    REQUIRE(env_run.out.find("depth=3\n") != std::string::npos);
    REQUIRE(env_run.out.find("variant=full\n") != std::string::npos);

    const auto flag_wins = run_cli("flops --n 64 --depth 2", "BSA_N=128 BSA_VARIANT=full ");
    REQUIRE(flag_wins.exit_code == 0);
    REQUIRE(flag_wins.out.find("n=64\n") != std::string::npos);
}

TEST_CASE("bench writes metadata, header, and one row per point") {
    const auto r = run_cli(
        "bench --min-n 64 --max-n 128 --variant full --variant bsa "
        "--repeats 3 --warmups 1 --ball-size 64 --top-k 2 --out bench_smoke.csv");
    REQUIRE(r.exit_code == 0);
    const std::string csv = slurp("bench_smoke.csv");
    std::remove("bench_smoke.csv");
    const auto rows = lines_of(csv);
    REQUIRE(rows.size() == 6);  // comment + header + 2 sizes x 2 variants
    REQUIRE(rows[0].rfind("# threads=", 0) == 0);
    REQUIRE(rows[0].find("repeats=3") != std::string::npos);
    REQUIRE(rows[1] == "n,variant,ms_median,flops");
    const auto first = split_csv(rows[2]);
    REQUIRE(first.size() == 4);
    REQUIRE(first[0] == "64");
    REQUIRE(std::stod(first[2]) > 0.0);
    REQUIRE(std::stoull(first[3]) > 0);
}

TEST_CASE("train writes metrics and a loadable checkpoint, reruns identical") {
    const std::string args =
        "train --n 64 --steps 3 --ball-size 32 --block-len 4 --top-k 2 --group-size 4 "
        "--heads 2 --model-dim 16 --head-dim 8 --seed 5 --threads 1 --out train_smoke.csv";
    const auto r = run_cli(args);
    REQUIRE(r.exit_code == 0);
    const std::string first = slurp("train_smoke.csv");
    const std::string ckpt_first = slurp("train_smoke.ckpt");
    REQUIRE_FALSE(first.empty());
    REQUIRE(ckpt_first.rfind("bsa-checkpoint v1\n", 0) == 0);
    REQUIRE(ckpt_first.find("dtype float32") != std::string::npos);

    const auto rows = lines_of(first);
    REQUIRE(rows[0] == "step,lr,train_mse,test_mse");
    REQUIRE(split_csv(rows[1])[0] == "0");
    REQUIRE(split_csv(rows.back())[0] == "3");

    const auto r2 = run_cli(args);
    REQUIRE(r2.exit_code == 0);
    REQUIRE(slurp("train_smoke.csv") == first);
    REQUIRE(slurp("train_smoke.ckpt") == ckpt_first);
    std::remove("train_smoke.csv");
    std::remove("train_smoke.ckpt");
}

TEST_CASE("train with zero steps logs exactly the initial loss") {
    const auto r = run_cli(
        "train --n 64 --steps 0 --ball-size 32 --block-len 4 --top-k 2 --group-size 4 "
        "--heads 2 --model-dim 16 --head-dim 8");
    REQUIRE(r.exit_code == 0);
    const auto rows = lines_of(r.out);
    REQUIRE(rows.size() == 2);
    REQUIRE(rows[0] == "step,lr,train_mse,test_mse");
    REQUIRE(split_csv(rows[1])[0] == "0");
}

TEST_CASE("train consumes a point file with targets") {
    {
        std::ofstream f("cloud_smoke.txt");
        for (int i = 0; i < 24; ++i)
            f << 0.1 * i << " " << 0.2 * i << " " << 0.05 * i << " " << (i % 3) << "\n";
    }
    const auto r = run_cli(
        "train --data cloud_smoke.txt --steps 2 --ball-size 8 --block-len 2 --top-k 1 "
        "--group-size 2 --heads 2 --model-dim 16 --head-dim 8 --out file_train.csv");
    REQUIRE(r.exit_code == 0);
    REQUIRE(lines_of(slurp("file_train.csv")).size() >= 2);
    std::remove("file_train.csv");
    std::remove("file_train.ckpt");

    {
        std::ofstream f("cloud_smoke.txt");  // drop the target column
        for (int i = 0; i < 24; ++i) f << 0.1 * i << " " << 0.2 * i << " " << 0.05 * i << "\n";
    }
    const auto r2 = run_cli("train --data cloud_smoke.txt --steps 1 --ball-size 8");
    REQUIRE(r2.exit_code == 2);
    REQUIRE(r2.err.find("target column") != std::string::npos);
    std::remove("cloud_smoke.txt");
}

TEST_CASE("ablation grid covers the eight cells with finite losses") {
    const auto r = run_cli(
        "ablate --n 256 --steps 2 --ball-size 128 --heads 2 --model-dim 16 --head-dim 8 "
        "--out ablate_smoke.csv");
    REQUIRE(r.exit_code == 0);
    const auto rows = lines_of(slurp("ablate_smoke.csv"));
    std::remove("ablate_smoke.csv");
    REQUIRE(rows.size() == 9);
    REQUIRE(rows[0] == "block_len,group_size,final_test_mse");
    std::size_t diagonal = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto cells = split_csv(rows[i]);
        REQUIRE(cells.size() == 3);
        if (cells[0] == cells[1]) ++diagonal;
        const double mse = std::stod(cells[2]);
        REQUIRE(std::isfinite(mse));
        REQUIRE(mse >= 0.0);
    }
    REQUIRE(diagonal == 4);  // (4,4) (8,8) (16,16) (32,32)
}

TEST_CASE("receptive field marks compression everywhere and the ball exactly once") {
    const auto r = run_cli(
        "rf --n 128 --token 17 --ball-size 32 --block-len 4 --top-k 2 --group-size 4 "
        "--heads 2 --model-dim 16 --head-dim 8 --out rf_smoke.csv");
    REQUIRE(r.exit_code == 0);
    const auto rows = lines_of(slurp("rf_smoke.csv"));
    std::remove("rf_smoke.csv");
    REQUIRE(rows.size() == 129);
    REQUIRE(rows[0] == "token,in_ball,in_selection,in_compression");
    std::size_t ball_count = 0, slc_count = 0;
    bool token_in_own_ball = false;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto cells = split_csv(rows[i]);
        REQUIRE(cells.size() == 4);
        REQUIRE(cells[0] == std::to_string(i - 1));
        REQUIRE(cells[3] == "1");  // compression reaches every valid token
        if (cells[1] == "1") {
            ++ball_count;
            if (i - 1 == 17) token_in_own_ball = true;
        }
        if (cells[2] == "1") ++slc_count;
    }
    REQUIRE(ball_count == 32);  // exactly one ball of tokens
    REQUIRE(token_in_own_ball);
    REQUIRE(slc_count == 2 * 4);  // top-k blocks of block_len tokens
}

TEST_CASE("rf nests: masked selection never re-marks the own ball") {
    const auto r = run_cli(
        "rf --n 128 --token 3 --ball-size 32 --block-len 4 --top-k 2 --group-size 4 "
        "--heads 2 --model-dim 16 --head-dim 8");
    REQUIRE(r.exit_code == 0);
    const auto rows = lines_of(r.out);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto cells = split_csv(rows[i]);
        const bool in_ball = cells[1] == "1";
        const bool in_slc = cells[2] == "1";
        REQUIRE_FALSE((in_ball && in_slc));
    }
}

TEST_CASE("self-check suite passes clean and fails under the corruption hook") {
    const auto good = run_cli("check --seed 1");
    REQUIRE(good.exit_code == 0);
    const auto rows = lines_of(good.out);
    REQUIRE(rows.size() >= 6);
    for (std::size_t i = 0; i + 1 < rows.size(); ++i) REQUIRE(rows[i].rfind("PASS", 0) == 0);
    REQUIRE(rows.back() == "all checks passed");

    const auto bad = run_cli("check --seed 1", "BSA_CHECK_CORRUPT_TIES=1 ");
    REQUIRE(bad.exit_code == 1);
    REQUIRE(bad.out.find("FAIL topk-matches-reference") != std::string::npos);
}
