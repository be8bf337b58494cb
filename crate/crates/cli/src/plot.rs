//! Success-rate curves from sweep tables, one SVG per environment.

use std::path::{Path, PathBuf};

use casil::experiment::SweepTable;
use casil::model::Mode;
use plotters::prelude::*;

use crate::{read_sweep, CliError, CliResult, PlotArgs, SweepKind};

/// Mean success per setting for each mode of one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Curves {
    pub env: String,
    pub setting_name: String,
    pub series: Vec<(Mode, Vec<(f64, f64)>)>,
}

/// Setting, success sum and cell count.
type Sum = (f64, f64, usize);

/// Groups the cells of `tables` by environment and difficulty, averaging
/// success over seeds.
pub fn curves(tables: &[SweepTable]) -> Vec<Curves> {
    let mut out: Vec<Curves> = Vec::new();
    let mut sums: Vec<Vec<(Mode, Vec<Sum>)>> = Vec::new();
    for table in tables {
        for cell in &table.cells {
            let env = format!("{}-{}", cell.report.env, cell.report.difficulty);
            let e = match out.iter().position(|c| c.env == env) {
                Some(i) => i,
                None => {
                    out.push(Curves {
                        env,
                        setting_name: table.setting_name.clone(),
                        series: Vec::new(),
                    });
                    sums.push(Vec::new());
                    out.len() - 1
                }
            };
            let m = match sums[e].iter().position(|(m, _)| *m == cell.mode) {
                Some(i) => i,
                None => {
                    sums[e].push((cell.mode, Vec::new()));
                    sums[e].len() - 1
                }
            };
            let points = &mut sums[e][m].1;
            match points.iter_mut().find(|p| p.0 == cell.setting) {
                Some(p) => {
                    p.1 += cell.report.success_mean;
                    p.2 += 1;
                }
                None => points.push((cell.setting, cell.report.success_mean, 1)),
            }
        }
    }
    for (c, modes) in out.iter_mut().zip(sums) {
        for (mode, points) in modes {
            let mut p: Vec<(f64, f64)> = points.into_iter().map(|(x, s, n)| (x, s / n as f64)).collect();
            p.sort_by(|a, b| a.0.total_cmp(&b.0));
            c.series.push((mode, p));
        }
    }
    out
}

const COLORS: [RGBColor; 4] = [RGBColor(31, 119, 180), RGBColor(255, 127, 14), RGBColor(44, 160, 44), RGBColor(214, 39, 40)];

fn draw(path: &Path, kind: SweepKind, c: &Curves) -> Result<(), Box<dyn std::error::Error>> {
    let xs: Vec<f64> = c.series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
    let (mut lo, mut hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if lo == hi {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} ({})", kind.name(), c.env), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(lo - pad..hi + pad, 0f64..1.05f64)?;
    chart.configure_mesh().x_desc(c.setting_name.as_str()).y_desc("success rate").draw()?;
    for (i, (mode, points)) in c.series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))?
            .label(mode.name())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart.draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

/// Writes one image per environment found in the inputs and returns the
/// paths.
pub fn plot_tables(kind: SweepKind, tables: &[SweepTable], out: &Path) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for c in curves(tables) {
        let path = out.join(format!("{}-{}.svg", kind.name(), c.env));
        draw(&path, kind, &c).map_err(|e| CliError::Failed(casil::Error::InvalidArgument(format!("plot failed: {e}"))))?;
        written.push(path);
    }
    Ok(written)
}

pub fn plot(a: PlotArgs) -> CliResult<()> {
    let mut tables = Vec::new();
    for dir in &a.input {
        let t = read_sweep(&casil::cli_io::resolve_out(dir))?;
        let expected = match a.kind {
            SweepKind::DataDrop => "retained",
            SweepKind::OptionCount => "skills",
            SweepKind::Epsilon => "epsilon",
        };
        if t.setting_name != expected {
            return Err(CliError::Usage(format!(
                "{} holds a sweep over {}, not a {} sweep",
                dir.display(),
                t.setting_name,
                a.kind.name()
            )));
        }
        tables.push(t);
    }
    let out = casil::cli_io::resolve_out(&a.out);
    for p in plot_tables(a.kind, &tables, &out)? {
        println!("{}", p.display());
    }
    Ok(())
}
