use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mpada_core::acquisition::{Mode, Session};
use mpada_core::analysis::{
    angle_series_from_flux, angle_series_from_s21, coherent_subtract_time_domain_with, default_thresholds,
    delay_statistics, interval_errors, magnitude, peak_bins, synchrony_lag, tick_timestamps, DelayStats,
    TomographyDataset, TransformOptions, Window,
};
use mpada_core::datastore::archive::MANIFEST;
use mpada_core::datastore::{read_archive, read_touchstone};
use mpada_core::sim::LoopScenario;
use serde_json::json;

use crate::{AnalyzeCommand, Failure, WindowArg};

pub fn analyze(cmd: AnalyzeCommand) -> Result<u8, Failure> {
    match cmd {
        AnalyzeCommand::Clutter {
            sp,
            so,
            out,
            pad_to,
            window,
            json,
        } => clutter(&sp, &so, &out, pad_to, window, json),
        AnalyzeCommand::Jitter {
            input,
            modality,
            target_ms,
            out,
            json,
        } => jitter(&input, modality.as_deref(), target_ms, &out, json),
        AnalyzeCommand::Sync {
            input,
            flux,
            rf,
            dt_ms,
            max_lag,
            out,
            json,
        } => sync(&input, &flux, &rf, dt_ms, max_lag, &out, json),
    }
}

fn fail(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::config(format!("{}: {e}", path.display()))
}

fn is_archive(path: &Path) -> bool {
    path.join(MANIFEST).is_file()
}

fn load_archive(path: &Path) -> Result<Session, Failure> {
    read_archive(path).map_err(|e| fail(path, e))
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).map_err(|e| fail(dir, e))?;
    let p = dir.join(name);
    fs::write(&p, text).map_err(|e| fail(&p, e))?;
    Ok(p)
}

/// Trailing integer of a file stem, for `trace-10` after `trace-9`.
fn numeric_suffix(p: &Path) -> Option<u64> {
    let stem = p.file_stem()?.to_str()?;
    let digits: String = stem.chars().rev().take_while(char::is_ascii_digit).collect();
    digits.chars().rev().collect::<String>().parse().ok()
}

fn load_dataset(path: &Path) -> Result<TomographyDataset, Failure> {
    let label = path.file_name().and_then(|n| n.to_str()).unwrap_or("data").to_string();
    if is_archive(path) {
        let s = load_archive(path)?;
        return TomographyDataset::from_session(label, &s).map_err(|e| fail(path, e));
    }
    if !path.is_dir() {
        return Err(fail(path, "expected a session archive or a directory of s2p files"));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| fail(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("s2p")))
        .collect();
    files.sort_by(|a, b| numeric_suffix(a).cmp(&numeric_suffix(b)).then_with(|| a.cmp(b)));
    let mut traces = Vec::with_capacity(files.len());
    for f in &files {
        let text = fs::read_to_string(f).map_err(|e| fail(f, e))?;
        let t = read_touchstone(&text).and_then(|t| t.s21_trace()).map_err(|e| fail(f, e))?;
        traces.push(t);
    }
    let pairs: Vec<_> = traces.iter().enumerate().collect();
    TomographyDataset::from_traces(label, &pairs).map_err(|e| fail(path, e))
}

fn clutter(sp: &Path, so: &Path, out: &Path, pad_to: Option<usize>, window: WindowArg, json_out: bool) -> Result<u8, Failure> {
    let a = load_dataset(sp)?;
    let b = load_dataset(so)?;
    let opts = TransformOptions {
        pad_to,
        window: match window {
            WindowArg::None => Window::None,
            WindowArg::Hann => Window::Hann,
        },
    };
    let td = coherent_subtract_time_domain_with(&a, &b, opts).map_err(|e| Failure::config(format!("clutter: {e}")))?;
    let mag = magnitude(&td);
    let peaks = peak_bins(&td);

    let bins = mag.first().map_or(0, Vec::len);
    let mut m = String::from("angle");
    for k in 0..bins {
        write!(m, ",bin_{k}").unwrap();
    }
    m.push('\n');
    for (i, row) in mag.iter().enumerate() {
        write!(m, "{i}").unwrap();
        for v in row {
            write!(m, ",{v}").unwrap();
        }
        m.push('\n');
    }
    let mut p = String::from("angle,peak_bin,peak_magnitude\n");
    for (i, (&k, row)) in peaks.iter().zip(&mag).enumerate() {
        writeln!(p, "{i},{k},{}", row[k]).unwrap();
    }
    let mp = write_out(out, "clutter_magnitude.csv", &m)?;
    let pp = write_out(out, "clutter_peaks.csv", &p)?;
    if json_out {
        println!(
            "{}",
            json!({ "angles": peaks.len(), "bins": bins, "peak_bins": peaks,
                    "files": [mp.display().to_string(), pp.display().to_string()] })
        );
    } else {
        eprintln!("{} angles x {bins} bins -> {}, {}", peaks.len(), mp.display(), pp.display());
    }
    Ok(0)
}

/// `t_ms` of one modality CSV, first path only for trace files.
fn csv_tick_times(path: &Path) -> Result<Vec<f64>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| fail(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| fail(path, "empty file"))?.split(',').collect();
    if header.first() != Some(&"t_ms") {
        return Err(fail(path, "first column must be t_ms"));
    }
    let stepped = header.get(1) == Some(&"step_id");
    let mut first_step: Option<String> = None;
    let mut t = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut f = line.split(',');
        let ts = f.next().unwrap_or("");
        let v: f64 = ts.parse().map_err(|_| fail(path, format!("line {}: bad t_ms {ts:?}", i + 2)))?;
        if stepped {
            let step = f.next().unwrap_or("").to_string();
            if first_step.get_or_insert_with(|| step.clone()) != &step {
                continue;
            }
        }
        t.push(v);
    }
    Ok(t)
}

fn jitter(input: &Path, only: Option<&str>, target_ms: Option<f64>, out: &Path, json_out: bool) -> Result<u8, Failure> {
    let mut series: Vec<(String, f64, Vec<f64>)> = Vec::new();
    if is_archive(input) {
        let s = load_archive(input)?;
        match s.plan.mode {
            Mode::Parallel => {
                for m in &s.plan.modalities {
                    series.push((m.id.clone(), target_ms.unwrap_or(m.interval_ms as f64), tick_timestamps(&s, &m.id)));
                }
            }
            Mode::Sequential => {
                let t = target_ms
                    .or(s.plan.target_interval_ms.map(|t| t as f64))
                    .ok_or_else(|| Failure::config("sequential plan has no target interval; pass --target-ms"))?;
                for id in s.buffers.keys() {
                    series.push((id.clone(), t, tick_timestamps(&s, id)));
                }
            }
        }
        if let Some(m) = only {
            series.retain(|(id, _, _)| id == m);
            if series.is_empty() {
                return Err(fail(input, format!("no modality {m:?}")));
            }
        }
    } else {
        let t = target_ms.ok_or_else(|| Failure::config("--target-ms is required for CSV input"))?;
        let name = input.file_stem().and_then(|s| s.to_str()).unwrap_or("series").to_string();
        series.push((name, t, csv_tick_times(input)?));
    }

    let thresholds = default_thresholds();
    let mut stats_csv = String::from("modality,target_ms,n_intervals,mse_ms2,variance_ms2,mean_abs_ms\n");
    let mut cdf_csv = String::from("modality,d_ms,probability\n");
    let mut summary = Vec::new();
    for (id, t, ts) in &series {
        let tau = interval_errors(ts, *t).map_err(|e| Failure::config(format!("{id}: {e}")))?;
        let st: DelayStats = delay_statistics(&tau, &thresholds).map_err(|e| Failure::config(format!("{id}: {e}")))?;
        writeln!(stats_csv, "{id},{t},{},{},{},{}", tau.len(), st.mse_ms2, st.variance_ms2, st.mean_abs_ms).unwrap();
        for c in &st.cdf {
            writeln!(cdf_csv, "{id},{},{}", c.d_ms, c.probability).unwrap();
        }
        summary.push(json!({ "modality": id, "target_ms": t, "n_intervals": tau.len(), "mse_ms2": st.mse_ms2,
                             "variance_ms2": st.variance_ms2, "mean_abs_ms": st.mean_abs_ms,
                             "p_below_10ms": st.probability_below(10.0) }));
    }
    write_out(out, "delay_stats.csv", &stats_csv)?;
    write_out(out, "delay_cdf.csv", &cdf_csv)?;
    if json_out {
        println!("{}", json!({ "modalities": summary }));
    } else {
        for s in &summary {
            eprintln!(
                "{}: {} intervals, MSE {:.3} ms^2, P(tau<10 ms) {:.4}",
                s["modality"].as_str().unwrap_or(""),
                s["n_intervals"],
                s["mse_ms2"].as_f64().unwrap_or(f64::NAN),
                s["p_below_10ms"].as_f64().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(0)
}

fn sync(input: &Path, flux: &str, rf: &str, dt_ms: f64, max_lag: usize, out: &Path, json_out: bool) -> Result<u8, Failure> {
    let s = load_archive(input)?;
    let a = angle_series_from_flux(s.modality(flux));
    let b = angle_series_from_s21(s.modality(rf), &LoopScenario::default());
    let lag = synchrony_lag(&a, &b, dt_ms, max_lag).map_err(|e| Failure::config(format!("sync: {e}")))?;
    write_out(out, "sync.csv", &format!("flux,rf,dt_ms,lag_samples\n{flux},{rf},{dt_ms},{lag}\n"))?;
    if json_out {
        println!("{}", json!({ "flux": flux, "rf": rf, "dt_ms": dt_ms, "lag_samples": lag }));
    } else {
        eprintln!("lag {lag} sample(s) at {dt_ms} ms");
    }
    Ok(0)
}
