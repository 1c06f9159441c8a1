//! Evaluation report rendering.

use std::fmt::Write;

use nue_core::eval::{EvalReport, LengthGroups};

pub fn to_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("reports serialize")
}

fn range(b: &LengthGroups, i: usize) -> String {
    match i {
        0 => format!("< {} s", b.short_below),
        1 => format!("{}-{} s", b.short_below, b.long_from),
        _ => format!(">= {} s", b.long_from),
    }
}

/// Plain-text table of the overall and per-group figures.
pub fn to_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let pct = |v: f64| format!("{:.2}%", 100.0 * v);
    let _ = writeln!(
        s,
        "{:<8} {:<14} {:>6} {:>9} {:>9} {:>8}",
        "group", "length", "utts", "edits", "chars", "CER"
    );
    for (i, g) in r.groups.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:<8} {:<14} {:>6} {:>9} {:>9} {:>8}",
            g.name,
            range(&r.boundaries, i),
            g.utterances,
            g.distance,
            g.ref_chars,
            if g.ref_chars == 0 {
                "-".into()
            } else {
                pct(g.cer)
            }
        );
    }
    let _ = writeln!(
        s,
        "{:<8} {:<14} {:>6} {:>9} {:>9} {:>8}",
        "all",
        "",
        r.utterances,
        r.distance,
        r.ref_chars,
        pct(r.cer)
    );
    let d = &r.edit_distance;
    let _ = writeln!(
        s,
        "edit distance: min {} q1 {} median {} q3 {} max {}",
        d.min, d.q1, d.median, d.q3, d.max
    );
    if r.excluded > 0 {
        let _ = writeln!(
            s,
            "excluded {} utterance(s) with empty normalized references",
            r.excluded
        );
    }
    match r.rtf {
        Some(v) => {
            let _ = writeln!(s, "RTF: {v:.4}");
        }
        None => {
            let _ = writeln!(s, "RTF: -");
        }
    }
    s
}
