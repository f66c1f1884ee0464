use std::fs;
use std::path::Path;

use prunebench::argmax::{bench_argmax, bench_csv, bench_table, ArgmaxImpl};
use prunebench::bev::{stitch_topview, write_ppm, CameraRig, TopViewGrid};
use prunebench::metrics::ConfusionMatrix;
use prunebench::nn::{build_enet_mini, count_cost, load_model, save_model, CostOptions, MacConvention, ModelGraph};
use prunebench::prune::{prune_model, PruneOptions, PruningSpec};
use prunebench::synth::calibration_images;
use prunebench::{Error, LabelMap, Result, Shape, Tensor};

use crate::{BenchArgs, BevArgs, BuildArgs, Command, EvalArgs, FlopsArgs, InferArgs, PruneArgs};

pub fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Build(a) => build(a),
        Command::Infer(a) => infer(a),
        Command::Prune(a) => prune(a),
        Command::BenchArgmax(a) => bench(a),
        Command::Flops(a) => flops(a),
        Command::Eval(a) => eval(a),
        Command::BevStitch(a) => bev(a),
    }
}

fn annotate(e: Error, path: &str) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{path}: {io}"))),
        other => other,
    }
}

fn require_file(path: &str) -> Result<()> {
    if Path::new(path).is_file() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{path}: no such file"),
        )))
    }
}

fn require_dir(path: &str) -> Result<()> {
    if Path::new(path).is_dir() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{path}: no such directory"),
        )))
    }
}

fn require_parent(path: &str) -> Result<()> {
    match Path::new(path).parent() {
        Some(p) if !p.as_os_str().is_empty() => require_dir(&p.to_string_lossy()),
        _ => Ok(()),
    }
}

fn write_text(path: &str, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| annotate(e.into(), path))
}

fn workers(explicit: Option<usize>) -> Result<usize> {
    if let Some(w) = explicit {
        return if w == 0 {
            Err(Error::Config("worker count must be positive".into()))
        } else {
            Ok(w)
        };
    }
    if let Ok(v) = std::env::var("PRUNEBENCH_THREADS") {
        return match v.trim().parse::<usize>() {
            Ok(w) if w > 0 => Ok(w),
            _ => Err(Error::Config(format!("PRUNEBENCH_THREADS must be a positive integer, got {v:?}"))),
        };
    }
    Ok(std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Parses `WIDTHxHEIGHT` into (rows, cols).
fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("expected WIDTHxHEIGHT, got {s:?}"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn parse_shape(s: &str) -> Result<Shape> {
    let bad = || Error::Config(format!("expected N,C,H,W, got {s:?}"));
    let dims = s
        .split(',')
        .map(|d| d.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    match dims[..] {
        [n, c, h, w] => {
            let shape = Shape { n, c, h, w };
            shape.volume()?;
            Ok(shape)
        }
        _ => Err(bad()),
    }
}

fn load_graph(path: &str) -> Result<ModelGraph<f32>> {
    load_model(path).map_err(|e| annotate(e, path))
}

fn build(a: &BuildArgs) -> Result<()> {
    require_parent(&a.out)?;
    let g: ModelGraph<f32> = build_enet_mini(a.classes, a.width, a.seed)?;
    let enc = save_model(&g, &a.out).map_err(|e| annotate(e, &a.out))?;
    println!(
        "wrote {}: {} layers, {} parameters, {} weight bytes",
        a.out,
        g.nodes().len(),
        g.param_count(),
        enc.weight_payload_bytes
    );
    Ok(())
}

fn infer(a: &InferArgs) -> Result<()> {
    require_file(&a.model)?;
    require_file(&a.input)?;
    require_parent(&a.out)?;
    if let Some(p) = &a.ppm {
        require_parent(p)?;
    }
    let workers = workers(a.workers)?;
    let g = load_graph(&a.model)?;
    let x: Tensor<f32> = Tensor::load(&a.input).map_err(|e| annotate(e, &a.input))?;
    let labels = g.predict(&x, workers)?;
    labels.save(&a.out).map_err(|e| annotate(e, &a.out))?;
    if let Some(p) = &a.ppm {
        write_ppm(&labels.item(0)?, p).map_err(|e| annotate(e, p))?;
    }
    let (n, h, w) = labels.dims();
    println!("wrote {}: {n}x{h}x{w} labels, {workers} workers", a.out);
    Ok(())
}

fn prune(a: &PruneArgs) -> Result<()> {
    require_file(&a.model)?;
    require_parent(&a.out)?;
    if let Some(r) = &a.report {
        require_parent(r)?;
    }
    if let Some(c) = &a.calib {
        require_file(c)?;
    }
    let cost_input = parse_size(&a.input)?;
    let (ch, cw) = parse_size(&a.calib_size)?;
    let mac = MacConvention::from_factor(a.mac)?;
    let g = load_graph(&a.model)?;
    let calib = match &a.calib {
        Some(path) => vec![Tensor::<f32>::load(path).map_err(|e| annotate(e, path))?],
        None => calibration_images(a.calib_count, ch, cw, a.seed)?,
    };
    let spec = PruningSpec {
        shallow_factor: a.shallow_factor,
        deep_factor: a.deep_factor,
        excluded_blocks: a.exclude.clone(),
    };
    let opts = PruneOptions {
        samples_per_image: a.samples,
        seed: a.seed,
        cost_input,
        cost: CostOptions {
            mac,
            include_head: true,
        },
    };
    let (pruned, report) = prune_model(&g, &spec, &calib, &opts)?;
    save_model(&pruned, &a.out).map_err(|e| annotate(e, &a.out))?;
    if let Some(r) = &a.report {
        write_text(r, &report.to_csv())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<()> {
    if let Some(c) = &a.csv {
        require_parent(c)?;
    }
    let shape = parse_shape(&a.shape)?;
    let workers = workers(a.workers)?;
    let impls = a
        .implementations
        .iter()
        .map(|name| ArgmaxImpl::parse(name, workers))
        .collect::<Result<Vec<_>>>()?;
    let records = bench_argmax(shape, &impls, a.reps, a.seed)?;
    print!("{}", bench_table(&records));
    let csv = bench_csv(&records);
    println!();
    print!("{csv}");
    if let Some(c) = &a.csv {
        write_text(c, &csv)?;
    }
    Ok(())
}

fn flops(a: &FlopsArgs) -> Result<()> {
    require_file(&a.model)?;
    if let Some(c) = &a.csv {
        require_parent(c)?;
    }
    let (h, w) = parse_size(&a.input)?;
    let opts = CostOptions {
        mac: MacConvention::from_factor(a.mac)?,
        include_head: !a.no_head,
    };
    let g = load_graph(&a.model)?;
    let report = count_cost(&g, h, w, opts)?;
    print!("{}", report.to_table());
    println!(
        "input {w}x{h}, mac {}, head {}: {:.6} GFLOPs, {} parameters, {} bytes",
        a.mac,
        if a.no_head { "excluded" } else { "included" },
        report.flops as f64 / 1e9,
        report.params,
        report.model_size_bytes
    );
    let csv = report.to_csv();
    println!();
    print!("{csv}");
    if let Some(c) = &a.csv {
        write_text(c, &csv)?;
    }
    Ok(())
}

fn sorted_files(dir: &str) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| annotate(e.into(), dir))? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

fn eval(a: &EvalArgs) -> Result<()> {
    require_dir(&a.truth)?;
    require_dir(&a.pred)?;
    if let Some(c) = &a.csv {
        require_parent(c)?;
    }
    if a.classes == 0 {
        return Err(Error::Config("class count must be positive".into()));
    }
    let names = sorted_files(&a.truth)?;
    if names.is_empty() {
        return Err(Error::Config(format!("{}: no label files", a.truth)));
    }
    for name in &names {
        require_file(&Path::new(&a.pred).join(name).to_string_lossy())?;
    }
    let mut cm = ConfusionMatrix::with_ignore(a.classes, Some(a.ignore));
    for name in &names {
        let tp = Path::new(&a.truth).join(name).to_string_lossy().into_owned();
        let pp = Path::new(&a.pred).join(name).to_string_lossy().into_owned();
        let truth = LabelMap::load(&tp).map_err(|e| annotate(e, &tp))?;
        let pred = LabelMap::load(&pp).map_err(|e| annotate(e, &pp))?;
        cm.accumulate(&truth, &pred)
            .map_err(|e| Error::Shape(format!("{name}: {e}")))?;
    }
    print!("{}", cm.to_table(None)?);
    let csv = cm.to_csv()?;
    println!();
    print!("{csv}");
    if let Some(c) = &a.csv {
        write_text(c, &csv)?;
    }
    Ok(())
}

fn bev(a: &BevArgs) -> Result<()> {
    require_file(&a.calib)?;
    for l in &a.labels {
        require_file(l)?;
    }
    require_parent(&a.out)?;
    if let Some(p) = &a.ppm {
        require_parent(p)?;
    }
    let grid = TopViewGrid::parse(&a.grid)?;
    let workers = workers(a.workers)?;
    let rig = CameraRig::load(&a.calib).map_err(|e| annotate(e, &a.calib))?;
    if rig.cameras.len() != a.labels.len() {
        return Err(Error::Config(format!(
            "rig has {} cameras but {} label maps were given",
            rig.cameras.len(),
            a.labels.len()
        )));
    }
    let labels = a
        .labels
        .iter()
        .map(|p| LabelMap::load(p).map_err(|e| annotate(e, p)))
        .collect::<Result<Vec<_>>>()?;
    let top = stitch_topview(&rig.cameras, &labels, &grid, rig.theta_max, workers)?;
    top.save(&a.out).map_err(|e| annotate(e, &a.out))?;
    if let Some(p) = &a.ppm {
        write_ppm(&top, p).map_err(|e| annotate(e, p))?;
    }
    let seen = top.data().iter().filter(|&&v| v != prunebench::IGNORE_LABEL).count();
    println!(
        "wrote {}: {}x{} cells, {seen} seen by at least one camera",
        a.out, grid.rows, grid.cols
    );
    Ok(())
}
