//! Dataset reports: distance-distribution histograms (CSV + SVG) and a
//! per-dataset summary table.

use std::path::{Path, PathBuf};

use super::config::Manifest;
use crate::error::Result;
use crate::io::{load_metadata_csv, DistanceUnit};
use crate::synth::distance_histogram;
use crate::types::EventList;

const BIN_WIDTH_M: f64 = 0.25;

/// Files written by [`report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub histogram_svg: PathBuf,
    pub histogram_csvs: Vec<PathBuf>,
    pub summary_csv: PathBuf,
}

struct DatasetDistances {
    name: String,
    events: EventList,
}

/// Renders distance histograms for each manifest (one CSV per dataset plus
/// an overlaid SVG whose legend carries the manifest names) and a summary
/// table of count/mean/std/min/max.
pub fn report(manifest_paths: &[PathBuf], out_dir: &Path, unit: DistanceUnit) -> Result<ReportFiles> {
    std::fs::create_dir_all(out_dir)?;
    let mut datasets = Vec::new();
    for path in manifest_paths {
        let manifest = Manifest::load(path)?;
        let mut events = Vec::new();
        for entry in &manifest.entries {
            events.extend(load_metadata_csv(&entry.csv, unit)?.events);
        }
        let n = events.iter().map(|e| e.frame + 1).max().unwrap_or(0);
        datasets.push(DatasetDistances { name: manifest.name, events: EventList::new(events, n) });
    }

    let max_d = datasets
        .iter()
        .flat_map(|d| d.events.events.iter().map(|e| e.distance_m))
        .fold(0.0f64, f64::max)
        .max(BIN_WIDTH_M);
    let n_bins = (max_d / BIN_WIDTH_M).ceil() as usize;
    let edges: Vec<f64> = (0..=n_bins).map(|i| i as f64 * BIN_WIDTH_M).collect();

    let mut histogram_csvs = Vec::new();
    let mut all_counts = Vec::new();
    for ds in &datasets {
        let counts = distance_histogram(&ds.events, &edges)?;
        let mut csv = String::from("bin_start_m,bin_end_m,count\n");
        for (i, c) in counts.iter().enumerate() {
            csv.push_str(&format!("{},{},{}\n", edges[i], edges[i + 1], c));
        }
        let path = out_dir.join(format!("distance_histogram_{}.csv", sanitize(&ds.name)));
        std::fs::write(&path, csv)?;
        histogram_csvs.push(path);
        all_counts.push(counts);
    }

    let histogram_svg = out_dir.join("distance_histogram.svg");
    std::fs::write(
        &histogram_svg,
        render_histogram_svg(&datasets, &edges, &all_counts),
    )?;

    let mut summary = String::from("dataset,events,mean_m,std_m,min_m,max_m\n");
    for ds in &datasets {
        let d: Vec<f64> = ds.events.events.iter().map(|e| e.distance_m).collect();
        if d.is_empty() {
            summary.push_str(&format!("{},0,,,,\n", ds.name));
            continue;
        }
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let std = (d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        summary.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{:.4}\n",
            ds.name,
            d.len(),
            mean,
            std,
            min,
            max
        ));
    }
    let summary_csv = out_dir.join("summary.csv");
    std::fs::write(&summary_csv, summary)?;

    Ok(ReportFiles { histogram_svg, histogram_csvs, summary_csv })
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_metadata_csv;
    use crate::pipeline::config::ManifestEntry;
    use crate::synth::{synth_scene, SceneConfig};
    use crate::types::SourceTag;

    fn write_manifest(dir: &Path, name: &str, seed: u64) -> PathBuf {
        std::fs::create_dir_all(dir).unwrap();
        let cfg = SceneConfig::uniform(3, 4, seed);
        let (_, events) = synth_scene(&cfg).unwrap();
        let csv = dir.join("events.csv");
        write_metadata_csv(&csv, &events).unwrap();
        let manifest = Manifest {
            name: name.into(),
            seed: Some(seed),
            scene_config: None,
            entries: vec![ManifestEntry {
                wav: dir.join("missing.wav"),
                csv,
                source: SourceTag::Synthetic,
            }],
        };
        let path = dir.join("manifest.json");
        manifest.save(&path).unwrap();
        path
    }

    #[test]
    fn two_manifests_overlaid_with_legend() {
        let root = std::env::temp_dir().join("seldde_report_test");
        let _ = std::fs::remove_dir_all(&root);
        let a = write_manifest(&root.join("a"), "alpha", 3);
        let b = write_manifest(&root.join("b"), "beta", 4);
        let files = report(&[a, b], &root.join("out"), DistanceUnit::Meters).unwrap();
        assert_eq!(files.histogram_csvs.len(), 2);
        let svg = std::fs::read_to_string(&files.histogram_svg).unwrap();
        assert!(svg.contains(">alpha<") && svg.contains(">beta<"));
        let summary = std::fs::read_to_string(&files.summary_csv).unwrap();
        assert!(summary.lines().count() == 3);

        // histogram CSV counts equal the histogram operation's output
        let manifest = Manifest::load(&files.histogram_csvs[0].parent().map(|_| root.join("a/manifest.json")).unwrap()).unwrap();
        let events = crate::io::load_metadata_csv(&manifest.entries[0].csv, DistanceUnit::Meters).unwrap();
        let csv = std::fs::read_to_string(&files.histogram_csvs[0]).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        let edges: Vec<f64> = rows
            .iter()
            .map(|r| r.split(',').next().unwrap().parse().unwrap())
            .chain([rows.last().unwrap().split(',').nth(1).unwrap().parse().unwrap()])
            .collect();
        let counts = distance_histogram(&events, &edges).unwrap();
        for (row, want) in rows.iter().zip(counts.iter()) {
            let got: usize = row.split(',').nth(2).unwrap().parse().unwrap();
            assert_eq!(got, *want);
        }
    }
}

const PALETTE: [&str; 6] = ["#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377"];

fn render_histogram_svg(
    datasets: &[DatasetDistances],
    edges: &[f64],
    counts: &[Vec<usize>],
) -> String {
    let (w, h) = (720.0, 420.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 30.0, 50.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;
    let max_count = counts.iter().flat_map(|c| c.iter()).cloned().max().unwrap_or(1).max(1);
    let max_x = *edges.last().unwrap_or(&1.0);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">\
         Distance distribution by dataset</text>\n",
        ml
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h,
        ml + plot_w,
        mt + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h
    ));
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let y = mt + plot_h * (1.0 - frac);
        let value = (max_count as f64 * frac).round();
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"end\">{}</text>\n",
            ml - 6.0,
            y + 3.0,
            value
        ));
        let x_val = max_x * frac;
        let x = ml + plot_w * frac;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"middle\">{:.1}</text>\n",
            x,
            mt + plot_h + 16.0,
            x_val
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
         text-anchor=\"middle\">distance (m)</text>\n",
        ml + plot_w / 2.0,
        h - 14.0
    ));

    // step outline per dataset
    for (k, (ds, c)) in datasets.iter().zip(counts.iter()).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut points = String::new();
        for (i, count) in c.iter().enumerate() {
            let x0 = ml + plot_w * edges[i] / max_x;
            let x1 = ml + plot_w * edges[i + 1] / max_x;
            let y = mt + plot_h * (1.0 - *count as f64 / max_count as f64);
            points.push_str(&format!("{x0:.1},{y:.1} {x1:.1},{y:.1} "));
        }
        svg.push_str(&format!(
            "<polyline points=\"{points}\" fill=\"none\" stroke=\"{color}\" \
             stroke-width=\"1.6\"/>\n"
        ));
        let ly = mt + 14.0 + 16.0 * k as f64;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" \
             stroke-width=\"3\"/>\n",
            ml + plot_w - 150.0,
            ml + plot_w - 126.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            ml + plot_w - 120.0,
            ly + 4.0,
            ds.name
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
