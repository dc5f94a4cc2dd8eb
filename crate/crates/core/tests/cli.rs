mod common;

use std::path::Path;

use countlab::cli::{self, main_with};
use countlab::config::RunConfig;
use countlab::encoder::{load_params, save_params};
use countlab::io::{read_records, write_records, RECORDS_HEADER};
use countlab::pipeline;

use common::{files_in, oracle_config, oracle_params, small_config};

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p.to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["countlab"];
    full.extend_from_slice(args);
    main_with(full)
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn generate_zero_records_writes_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(run(&["--out", out, "generate", "--n", "0"]), 0);
    let text = std::fs::read_to_string(dir.path().join(cli::POOL_FILE)).unwrap();
    assert_eq!(text, format!("{RECORDS_HEADER}\n"));
}

#[test]
fn generate_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (d, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        assert_eq!(run(&["--seed", seed, "--out", d.to_str().unwrap(), "generate", "--n", "300"]), 0);
    }
    let read = |d: &Path| std::fs::read(d.join(cli::POOL_FILE)).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["--seed", "minus-one", "generate"]), 1);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nbatchsize = 4\n").unwrap();
    assert_eq!(run(&["--config", bad.to_str().unwrap(), "generate"]), 1);

    assert_eq!(run(&["--out", out, "curate"]), 2, "missing pool file is a data error");
    std::fs::write(dir.path().join(cli::POOL_FILE), "not a record file\n").unwrap();
    assert_eq!(run(&["--out", out, "curate"]), 2);
    assert_eq!(run(&["--out", out, "eval"]), 2, "missing checkpoint");
}

#[test]
fn parse_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut pool = pipeline::generate(&cfg).unwrap().records;
    pool.truncate(3);
    let path = dir.path().join("pool.jsonl");
    write_records(&path, &pool).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"id\": \"broken\"\n");
    std::fs::write(&path, text).unwrap();
    let err = cli::cmd_curate(&cfg, &path).unwrap_err();
    assert!(err.to_string().contains("pool.jsonl:5:"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn insufficient_benchmark_pool_names_the_number() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.generate.n = 400;
    cli::cmd_generate(&cfg).unwrap();
    cfg.bench.quota = 500;
    let err = cli::cmd_bench(
        &cfg,
        &dir.path().join(cli::POOL_FILE),
        &dir.path().join(cli::COUNTING_FILE),
        None,
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("ten"), "{err}");
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let c = write_config(dir.path(), &cfg);
    assert_eq!(run(&["--config", &c, "run"]), 0);
    for f in [
        cli::POOL_FILE,
        cli::MODES_FILE,
        cli::COUNTING_FILE,
        cli::GENERAL_FILE,
        cli::REJECTIONS_FILE,
        cli::STATS_FILE,
        cli::BENCHMARK_FILE,
        cli::BENCH_STATS_FILE,
        cli::MODEL_FILE,
        cli::METRICS_FILE,
        "summary.csv",
        "confusion.csv",
        "per_number.csv",
    ] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let metrics = csv_rows(&dir.path().join(cli::METRICS_FILE));
    assert_eq!(metrics[0].join(","), "step,l_clip,l_count,l_total,effective_lambda,lr");
    assert_eq!(metrics.len() - 1, cfg.train.total_steps);
    let stats = csv_rows(&dir.path().join(cli::STATS_FILE));
    assert_eq!(stats[0].join(","), "number,available,selected");
    let bench = read_records(&dir.path().join(cli::BENCHMARK_FILE)).unwrap();
    assert_eq!(bench.records.len(), 9 * cfg.bench.quota);
    let counting = read_records(&dir.path().join(cli::COUNTING_FILE)).unwrap();
    let ids: std::collections::HashSet<_> = counting.records.iter().map(|r| &r.id).collect();
    assert!(bench.records.iter().all(|r| !ids.contains(&r.id)));
    let rejections = csv_rows(&dir.path().join(cli::REJECTIONS_FILE));
    assert_eq!(rejections[0].join(","), "line,id,reason");
    assert!(rejections.len() > 1);
}

#[test]
fn lambda_zero_logs_unweighted_count_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let c = write_config(dir.path(), &cfg);
    for cmd in [&["generate"][..], &["curate"], &["train", "--lambda", "0"]] {
        let mut args = vec!["--config", c.as_str()];
        args.extend_from_slice(cmd);
        assert_eq!(run(&args), 0);
    }
    for row in csv_rows(&dir.path().join(cli::METRICS_FILE)).iter().skip(1) {
        let v: Vec<f64> = row.iter().map(|x| x.parse().unwrap()).collect();
        assert_eq!(v[4], 0.0);
        assert!(v[2] > 0.0);
        assert_eq!(v[3], v[1]);
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&dir.path().join("data"));
    cfg.eval.checkpoint_every = 15;
    let c = write_config(dir.path(), &cfg);
    let data = dir.path().join("data");
    assert_eq!(run(&["--config", &c, "generate"]), 0);
    assert_eq!(run(&["--config", &c, "curate"]), 0);
    let counting = data.join(cli::COUNTING_FILE);
    let general = data.join(cli::GENERAL_FILE);
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "--config",
            c.as_str(),
            "--out",
            out.to_str().unwrap(),
            "train",
            "--counting",
            counting.to_str().unwrap(),
            "--general",
            general.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        run(&args)
    };
    assert_eq!(train(&full, &[]), 0);
    let ckpt = full.join("checkpoints").join("step_0000015.params");
    assert!(ckpt.exists());
    std::fs::create_dir_all(&part).unwrap();
    std::fs::copy(ckpt.with_extension("params.opt"), part.join("from.params.opt")).unwrap();
    std::fs::copy(&ckpt, part.join("from.params")).unwrap();
    let from = part.join("from.params");
    assert_eq!(train(&part, &["--resume", from.to_str().unwrap()]), 0);

    let a = std::fs::read(full.join(cli::MODEL_FILE)).unwrap();
    let b = std::fs::read(part.join(cli::MODEL_FILE)).unwrap();
    assert_eq!(a, b, "final parameters differ after resume");
    let full_rows = csv_rows(&full.join(cli::METRICS_FILE));
    let part_rows = csv_rows(&part.join(cli::METRICS_FILE));
    assert_eq!(part_rows[0], full_rows[0]);
    assert_eq!(&part_rows[1..], &full_rows[16..], "post-resume loss reports differ");
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.train.base_lr = 1e300;
    cfg.train.lr_schedule = countlab::training::LrSchedule::Constant;
    let c = write_config(dir.path(), &cfg);
    assert_eq!(run(&["--config", &c, "generate"]), 0);
    assert_eq!(run(&["--config", &c, "curate"]), 0);
    assert_eq!(run(&["--config", &c, "train"]), 3);
}

#[test]
fn eval_with_oracle_params_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = oracle_config(dir.path());
    let c = write_config(dir.path(), &cfg);
    for cmd in ["generate", "curate", "bench"] {
        assert_eq!(run(&["--config", &c, cmd]), 0);
    }
    save_params(&oracle_params(&cfg), &dir.path().join(cli::MODEL_FILE)).unwrap();
    assert_eq!(run(&["--config", &c, "eval"]), 0);
    let summary = csv_rows(&dir.path().join("summary.csv"));
    assert_eq!(summary[0].join(","), "accuracy,mean_deviation,n_records");
    assert_eq!(summary[1], vec!["100", "0", "18"]);
    let confusion = csv_rows(&dir.path().join("confusion.csv"));
    for (i, row) in confusion.iter().skip(1).enumerate() {
        for (j, v) in row.iter().skip(1).enumerate() {
            let want = if i == j { "2" } else { "0" };
            assert_eq!(v, want);
        }
    }
}

#[test]
fn retrieve_returns_at_most_the_pool() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = oracle_config(dir.path());
    cfg.generate.n = 60;
    let c = write_config(dir.path(), &cfg);
    assert_eq!(run(&["--config", &c, "generate"]), 0);
    save_params(&oracle_params(&cfg), &dir.path().join(cli::MODEL_FILE)).unwrap();
    let holdout = read_records(&dir.path().join(cli::POOL_FILE))
        .unwrap()
        .records
        .iter()
        .filter(|r| r.split == countlab::io::Split::Holdout)
        .count();
    assert!(holdout > 0 && holdout < 1000);
    assert_eq!(
        run(&["--config", &c, "retrieve", "--caption", "a photo of four dogs", "--k", "1000"]),
        0
    );
    let rows = csv_rows(&dir.path().join(cli::RETRIEVAL_FILE));
    assert_eq!(rows[0].join(","), "rank,scene_id,similarity,count");
    assert_eq!(rows.len() - 1, holdout);

    assert_eq!(
        run(&["--config", &c, "retrieve", "--caption", "a photo of four dogs", "--split", "all"]),
        0
    );
    let rows = csv_rows(&dir.path().join(cli::RETRIEVAL_FILE));
    assert_eq!(rows.len() - 1, 5);
    let pool = read_records(&dir.path().join(cli::POOL_FILE)).unwrap().records;
    let fours = pool.iter().filter(|r| r.scene.dominant().map(|d| d.1) == Some(4)).count();
    let hits = rows[1..].iter().filter(|r| r[3] == "4").count();
    assert_eq!(hits, fours.min(5), "oracle parameters retrieve scenes with four objects first");
}

#[test]
fn sweep_emits_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.sweep.total_steps = Some(3);
    let c = write_config(dir.path(), &cfg);
    for cmd in ["generate", "curate", "bench", "sweep"] {
        assert_eq!(run(&["--config", &c, cmd]), 0);
    }
    let rows = csv_rows(&dir.path().join(cli::SWEEP_FILE));
    assert_eq!(rows[0].join(","), pipeline::SWEEP_HEADER);
    assert_eq!(rows.len() - 1, 12);
}

#[test]
fn show_config_prints_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let text = cfg.to_toml();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    assert_eq!(run(&["show-config"]), 0);
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = oracle_config(dir.path());
    let p = oracle_params(&cfg);
    let path = dir.path().join("x.params");
    save_params(&p, &path).unwrap();
    assert_eq!(load_params(&path).unwrap(), p);
    assert_eq!(files_in(dir.path()).len(), 1);
}
