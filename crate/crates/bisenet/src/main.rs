//! Command-line surface: cost analysis, synthetic training, image
//! inference, and golden-tensor dump/compare workflows.
//!
//! Exit codes: 0 success, 1 compare beyond tolerance, 2 usage/config/format
//! errors, 3 numeric failure, 4 checkpoint mismatch.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bisenet::analysis::{
    inference_cost, report_to_csv, report_to_text, reproduce_tables, tables_to_csv,
    tables_to_text, Convention,
};
use bisenet::config::RunConfig;
use bisenet::error::{Error, Result};
use bisenet::graph::Mode;
use bisenet::image_io::{read_pgm, read_ppm, write_label_pgm};
use bisenet::labels::argmax_channels;
use bisenet::model::{build_model, infer_logits, Variant, OUTPUT_MAIN};
use bisenet::scalar::Scalar;
use bisenet::tensor::io::{read_tensor_f64, write_tensor};
use bisenet::tensor::{Shape4, Tensor};
use bisenet::train::synth::synth_sample;
use bisenet::train::{evaluate, train};

#[derive(Parser)]
#[command(name = "bisenet", version, about = "Two-branch segmentation engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Static FLOPs/parameter analysis; optionally the full ablation grid.
    Analyze {
        /// Run configuration file (key = value); defaults to the demo setup.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the analysis input size, e.g. 512x1024.
        #[arg(long)]
        input_hw: Option<String>,
        /// FLOPs per multiply-accumulate: 1 or 2.
        #[arg(long, default_value_t = 1)]
        flops_per_mac: u8,
        /// Also sweep the ablation grid and emit the comparison tables.
        #[arg(long)]
        grid: bool,
        /// Directory for the report files.
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
    },
    /// Train on the synthetic task and write a checkpoint + history CSV.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's iteration count.
        #[arg(long)]
        max_iter: Option<usize>,
        /// Suppress per-iteration progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Segment one image (P6 color or P5 grayscale) into a P5 label map.
    Infer {
        /// Checkpoint directory produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image path.
        #[arg(long)]
        input: PathBuf,
        /// Output label-map path (binary P5).
        #[arg(long)]
        output: PathBuf,
        /// Config file; defaults to config.txt inside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also dump raw main-head logits (network resolution) as BT2.
        #[arg(long)]
        dump_logits: Option<PathBuf>,
    },
    /// Dump deterministic golden tensors for named graph nodes.
    DumpGolden {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's seed (controls init and the probe image).
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated node names to dump; default logits.main.
        #[arg(long, value_delimiter = ',')]
        taps: Vec<String>,
        #[arg(long, default_value = "golden")]
        out: PathBuf,
        /// Run in double precision instead of single.
        #[arg(long)]
        f64: bool,
    },
    /// Compare two BT2 tensor dumps; exits 1 if beyond tolerance.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Maximum allowed absolute difference.
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn parse_hw_flag(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| Error::config(format!("--input-hw expects HxW, got '{s}'")))?;
    let h = h.parse().map_err(|_| Error::config(format!("bad height in '{s}'")))?;
    let w = w.parse().map_err(|_| Error::config(format!("bad width in '{s}'")))?;
    Ok((h, w))
}

fn cmd_analyze(
    config: Option<PathBuf>,
    input_hw: Option<String>,
    flops_per_mac: u8,
    grid: bool,
    out: PathBuf,
) -> Result<()> {
    let mut cfg = load_config(&config)?;
    if let Some(hw) = input_hw {
        cfg.arch.input_hw = parse_hw_flag(&hw)?;
        cfg.arch.validate()?;
    }
    let convention = match flops_per_mac {
        1 => Convention::OneMacOneFlop,
        2 => Convention::OneMacTwoFlops,
        n => return Err(Error::config(format!("--flops-per-mac must be 1 or 2, got {n}"))),
    };
    let report = inference_cost(&cfg.arch, Variant::Full, convention)?;
    let text = report_to_text(&report);
    print!("{text}");
    fs::create_dir_all(&out)?;
    fs::write(out.join("cost_report.txt"), &text)?;
    fs::write(out.join("cost_report.csv"), report_to_csv(&report))?;
    if grid {
        let tables = reproduce_tables(convention)?;
        let text = tables_to_text(&tables);
        print!("{text}");
        fs::write(out.join("tables.txt"), &text)?;
        fs::write(out.join("tables.csv"), tables_to_csv(&tables))?;
    }
    println!("reports written to {}", out.display());
    Ok(())
}

fn cmd_train(
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    max_iter: Option<usize>,
    quiet: bool,
) -> Result<()> {
    let mut cfg = load_config(&config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(mi) = max_iter {
        cfg.train.max_iter = mi;
    }
    let out = out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("run"));
    cfg.arch.validate()?;
    cfg.train.validate()?;

    let mut graph = build_model::<f32>(&cfg.arch, Variant::Full)?;
    graph.init_params(cfg.train.seed);
    let report = train(&mut graph, &cfg.train, |s| {
        if !quiet && (s.iter % 10 == 0 || s.iter + 1 == cfg.train.max_iter) {
            println!(
                "iter {:4}  lr {:.5}  main {:.4}  aux {:.4}  total {:.4}",
                s.iter, s.lr, s.loss_main, s.loss_aux, s.loss_total
            );
        }
    })?;

    let ckpt_dir = out.join("checkpoint");
    bisenet::checkpoint::save(&graph, &ckpt_dir)?;
    // The config stored with the checkpoint describes the model and
    // training recipe only; path keys are cleared so same-seed runs are
    // byte-identical regardless of where they were written.
    let mut saved = cfg.clone();
    saved.checkpoint = None;
    saved.out_dir = None;
    fs::write(ckpt_dir.join("config.txt"), saved.serialize())?;
    fs::write(out.join("history.csv"), report.history_csv())?;

    let acc = evaluate(
        &graph,
        cfg.train.seed,
        20,
        cfg.train.crop_hw,
        cfg.train.ignore_label,
    )?;
    let summary = format!("held_out_pixel_accuracy = {acc:.6}\n");
    fs::write(out.join("eval.txt"), &summary)?;
    print!("{summary}");
    println!("checkpoint written to {}", ckpt_dir.display());
    Ok(())
}

/// Reads a P6 color image, or a P5 grayscale image replicated to 3 channels.
fn read_input_image(path: &Path) -> Result<Tensor<f32>> {
    let head = fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    if head.starts_with(b"P6") {
        read_ppm::<f32>(path)
    } else if head.starts_with(b"P5") {
        let (h, w, data) = read_pgm(path)?;
        let mut t = Tensor::<f32>::zeros(Shape4::new(1, 3, h, w));
        for y in 0..h {
            for x in 0..w {
                let v = data[y * w + x] as f32 / 255.0;
                for c in 0..3 {
                    t.set(0, c, y, x, v);
                }
            }
        }
        Ok(t)
    } else {
        Err(Error::Format(format!(
            "{}: expected binary P6 or P5 image",
            path.display()
        )))
    }
}

fn cmd_infer(
    checkpoint: PathBuf,
    input: PathBuf,
    output: PathBuf,
    config: Option<PathBuf>,
    dump_logits: Option<PathBuf>,
) -> Result<()> {
    let config_path = config.unwrap_or_else(|| checkpoint.join("config.txt"));
    let cfg = RunConfig::load(&config_path)?;
    let mut graph = build_model::<f32>(&cfg.arch, Variant::Full)?;
    bisenet::checkpoint::load(&mut graph, &checkpoint)?;

    let image = read_input_image(&input)?;
    let logits = infer_logits(&graph, &cfg.arch, &image)?;
    let labels = argmax_channels(&logits)?;
    let full = labels.resize_nearest(image.shape().h, image.shape().w)?;
    write_label_pgm(&output, &full, cfg.arch.classes)?;
    if let Some(path) = dump_logits {
        write_tensor(&path, &logits)?;
    }
    println!(
        "labels written to {} ({}x{}, {} classes)",
        output.display(),
        full.h,
        full.w,
        cfg.arch.classes
    );
    Ok(())
}

fn dump_taps<S: Scalar>(cfg: &RunConfig, seed: u64, taps: &[String], out: &Path) -> Result<()> {
    let mut graph = build_model::<S>(&cfg.arch, Variant::Full)?;
    graph.init_params(seed);
    // A tap may name either a registered output (e.g. logits.main) or any
    // internal graph node (e.g. detail.s3.conv2.relu).
    let node_ids: Vec<_> = taps
        .iter()
        .map(|t| {
            graph
                .output_node(t)
                .or_else(|| graph.node_id(t))
                .ok_or_else(|| Error::config(format!("unknown tap '{t}'")))
        })
        .collect::<Result<_>>()?;

    let (h, w) = cfg.arch.input_hw;
    let (image, _) = synth_sample::<S>(seed, 0, h, w);
    let outputs = graph.output_names();
    let trace = graph.forward(&[("input", &image)], &outputs, Mode::Eval)?;
    fs::create_dir_all(out)?;
    for (tap, id) in taps.iter().zip(node_ids) {
        let value = trace.value(id).ok_or_else(|| {
            Error::config(format!("tap '{tap}' is not reachable from any output"))
        })?;
        let path = out.join(format!("{tap}.bt2"));
        write_tensor(&path, value)?;
        println!("wrote {} {}", path.display(), value.shape());
    }
    Ok(())
}

fn cmd_dump_golden(
    config: Option<PathBuf>,
    seed: Option<u64>,
    taps: Vec<String>,
    out: PathBuf,
    use_f64: bool,
) -> Result<()> {
    let cfg = load_config(&config)?;
    let seed = seed.unwrap_or(cfg.train.seed);
    let taps = if taps.is_empty() { vec![OUTPUT_MAIN.to_string()] } else { taps };
    if use_f64 {
        dump_taps::<f64>(&cfg, seed, &taps, &out)
    } else {
        dump_taps::<f32>(&cfg, seed, &taps, &out)
    }
}

fn cmd_compare(a: PathBuf, b: PathBuf, tolerance: f64) -> Result<bool> {
    let (dtype_a, ta) = read_tensor_f64(&a)?;
    let (dtype_b, tb) = read_tensor_f64(&b)?;
    if ta.shape() != tb.shape() {
        return Err(Error::config(format!(
            "shape mismatch: {} is {}, {} is {}",
            a.display(),
            ta.shape(),
            b.display(),
            tb.shape()
        )));
    }
    let mut max_diff = 0.0f64;
    let mut at = 0usize;
    for (i, (x, y)) in ta.data().iter().zip(tb.data()).enumerate() {
        let d = (x - y).abs();
        if d > max_diff {
            max_diff = d;
            at = i;
        }
    }
    let s = ta.shape();
    let (n, rem) = (at / (s.c * s.h * s.w), at % (s.c * s.h * s.w));
    let (c, rem) = (rem / (s.h * s.w), rem % (s.h * s.w));
    let (y, x) = (rem / s.w, rem % s.w);
    println!(
        "max abs diff {max_diff:.3e} at (n={n}, c={c}, h={y}, w={x}); shapes {s}, dtypes {}/{}",
        dtype_a.name(),
        dtype_b.name()
    );
    Ok(max_diff <= tolerance)
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Analyze { config, input_hw, flops_per_mac, grid, out } => {
            cmd_analyze(config, input_hw, flops_per_mac, grid, out)?;
        }
        Cmd::Train { config, out, seed, max_iter, quiet } => {
            cmd_train(config, out, seed, max_iter, quiet)?;
        }
        Cmd::Infer { checkpoint, input, output, config, dump_logits } => {
            cmd_infer(checkpoint, input, output, config, dump_logits)?;
        }
        Cmd::DumpGolden { config, seed, taps, out, f64 } => {
            cmd_dump_golden(config, seed, taps, out, f64)?;
        }
        Cmd::Compare { a, b, tolerance } => {
            if !cmd_compare(a, b, tolerance)? {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("BISENET_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: failed to configure thread pool: {e}");
                    return ExitCode::from(2);
                }
            }
            _ => {
                eprintln!("error: BISENET_THREADS must be a positive integer, got '{threads}'");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
