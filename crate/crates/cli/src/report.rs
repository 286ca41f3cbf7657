use std::collections::BTreeMap;
use std::fmt::Write;

use fedst_core::federation::{RoundLog, WireStats};
use fedst_core::metrics::{MetricReport, CSV_HEADER};

pub fn metrics_csv(run_id: &str, reports: &[&MetricReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_rows(run_id));
    }
    out
}

pub fn wire_csv(stats: &WireStats) -> String {
    format!(
        "messages,bytes_to_server,bytes_to_sites,total_bytes\n{},{},{},{}\n",
        stats.messages,
        stats.bytes_to_server,
        stats.bytes_to_sites,
        stats.total_bytes()
    )
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

/// Mean Dice per site over rounds, one polyline per site.
pub fn dice_curve_svg(title: &str, log: &[RoundLog]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (56.0, 120.0, 36.0, 44.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let mut series: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
    for entry in log {
        for r in &entry.reports {
            series.entry(r.site.as_str()).or_default().push((entry.round, r.mean_dice()));
        }
    }
    let max_round = log.iter().map(|l| l.round).max().unwrap_or(0).max(1) as f64;
    let x = |round: usize| left + pw * round as f64 / max_round;
    let y = |dice: f64| top + ph * (1.0 - dice.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{left}" y="22" font-size="14">{}</text>"#, escape(title));
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y0:.1}" x2="{x1:.1}" y2="{y0:.1}" stroke="#ddd"/><text x="{tx:.1}" y="{ty:.1}" text-anchor="end">{v:.1}</text>"##,
            y0 = y(v),
            x1 = left + pw,
            tx = left - 6.0,
            ty = y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{b:.1}" x2="{r:.1}" y2="{b:.1}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{b:.1}" stroke="black"/>"#,
        b = top + ph,
        r = left + pw
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">round</text><text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">mean Dice</text>"#,
        left + pw / 2.0,
        h - 8.0,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, (site, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = pts.iter().map(|&(r, d)| format!("{:.1},{:.1}", x(r), y(d))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 16.0 * i as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<line x1="{x0:.1}" y1="{ly:.1}" x2="{x1:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{tx:.1}" y="{ty:.1}">{}</text>"#,
            escape(site),
            x0 = left + pw + 12.0,
            x1 = left + pw + 32.0,
            tx = left + pw + 38.0,
            ty = ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
