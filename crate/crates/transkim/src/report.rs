//! Report rendering: a token heatmap colored by prune layer (HTML) and the
//! layerwise retention curve (CSV). Output is deterministic byte-for-byte:
//! no timestamps, no environment-dependent content.

use std::fmt::Write as _;

use crate::error::Result;
use crate::flops::{curve_area, layerwise_curve};
use crate::trace::SkimTrace;

/// 12-step teal-to-navy ramp; later prune layers get darker. Never-pruned
/// tokens are black, visually distinct from every ramp step.
const PALETTE: [(u8, u8, u8); 12] = [
    (38, 206, 205),
    (36, 185, 195),
    (35, 167, 187),
    (34, 149, 179),
    (33, 133, 171),
    (31, 114, 162),
    (30, 96, 154),
    (29, 82, 147),
    (28, 68, 141),
    (27, 55, 135),
    (27, 55, 135),
    (27, 55, 135),
];

/// Ramp index for a token pruned entering layer `k` of `l` layers.
fn palette_index(k: u32, l: usize) -> usize {
    debug_assert!(k >= 1 && (k as usize) <= l);
    if l <= 1 {
        return 0;
    }
    let spread = (k as usize - 1) * 11 / (l - 1);
    spread.min(11)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Retention CSV: `layer,retention` rows. Values are shortest-roundtrip
/// floats, so parsing them back reproduces the curve exactly.
pub fn render_csv(trace: &SkimTrace) -> Result<String> {
    let mut out = String::from("layer,retention\n");
    if trace.examples.is_empty() {
        return Ok(out);
    }
    let curve = layerwise_curve(&trace.examples)?;
    for (i, v) in curve.iter().enumerate() {
        writeln!(out, "{i},{v}").expect("string write");
    }
    Ok(out)
}

/// Per-example token heatmap plus the retention curve.
pub fn render_html(trace: &SkimTrace) -> Result<String> {
    let l = trace.n_layers();
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
    out.push_str("<title>Token skim report</title>\n<style>\n");
    out.push_str("body{font-family:system-ui,sans-serif;margin:2em;background:#fafafa;color:#222}\n");
    out.push_str(".tok{display:inline-block;padding:1px 4px;margin:1px;border-radius:3px;color:#fff;font-size:13px}\n");
    for (i, (r, g, b)) in PALETTE.iter().enumerate() {
        let fg = if i < 4 { "#063" } else { "#fff" };
        writeln!(out, ".p{i}{{background:rgb({r},{g},{b});color:{fg}}}").expect("string write");
    }
    out.push_str(".never{background:#000;color:#fff}\n");
    out.push_str(".ex{margin:0.6em 0;padding:0.4em;background:#fff;border:1px solid #ddd;border-radius:4px}\n");
    out.push_str("table{border-collapse:collapse}td,th{border:1px solid #ccc;padding:2px 8px;text-align:right}\n");
    out.push_str("</style>\n</head>\n<body>\n<h1>Token skim report</h1>\n");
    writeln!(
        out,
        "<p>config digest <code>{}</code>, {} examples, {} layers</p>",
        escape(&trace.config_digest),
        trace.examples.len(),
        l
    )
    .expect("string write");

    if trace.examples.is_empty() {
        out.push_str("<p><strong>no examples</strong></p>\n</body>\n</html>\n");
        return Ok(out);
    }

    let curve = layerwise_curve(&trace.examples)?;
    out.push_str("<h2>Retention</h2>\n<table>\n<tr><th>layer</th><th>retention</th></tr>\n");
    for (i, v) in curve.iter().enumerate() {
        writeln!(out, "<tr><td>{i}</td><td>{v:.6}</td></tr>").expect("string write");
    }
    writeln!(
        out,
        "</table>\n<p>normalized area under curve: {:.6}</p>",
        curve_area(&curve)
    )
    .expect("string write");

    out.push_str("<h2>Legend</h2>\n<p>");
    for k in 1..=l {
        writeln!(
            out,
            "<span class=\"tok p{}\">pruned entering layer {k}</span>",
            palette_index(k as u32, l)
        )
        .expect("string write");
    }
    out.push_str("<span class=\"tok never\">never pruned</span></p>\n");

    out.push_str("<h2>Examples</h2>\n");
    for ex in &trace.examples {
        writeln!(out, "<div class=\"ex\" id=\"ex{}\">", ex.id).expect("string write");
        for (tok, &p) in ex.tokens.iter().zip(ex.prune_layer.iter()) {
            let class = if p as usize == l + 1 {
                "never".to_string()
            } else {
                format!("p{}", palette_index(p, l))
            };
            writeln!(out, "<span class=\"tok {class}\">{}</span>", escape(tok))
                .expect("string write");
        }
        out.push_str("</div>\n");
    }
    out.push_str("</body>\n</html>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceExample;

    fn trace(examples: Vec<TraceExample>) -> SkimTrace {
        SkimTrace {
            config_digest: "cafe".into(),
            examples,
        }
    }

    #[test]
    fn empty_trace_yields_banner() {
        let html = render_html(&trace(vec![])).unwrap();
        assert!(html.contains("no examples"));
        assert!(html.starts_with("<!DOCTYPE html>"));
        let csv = render_csv(&trace(vec![])).unwrap();
        assert_eq!(csv, "layer,retention\n");
    }

    #[test]
    fn never_pruned_tokens_are_black() {
        let t = trace(vec![TraceExample {
            id: 0,
            tokens: vec!["[CLS]".into(), "tok30".into()],
            true_len: 2,
            prune_layer: vec![3, 3],
            kept_per_layer: vec![2, 2],
        }]);
        let html = render_html(&t).unwrap();
        assert_eq!(html.matches("class=\"tok never\"").count(), 1 + 2);
    }

    #[test]
    fn csv_roundtrips_through_parse() {
        let t = trace(vec![TraceExample {
            id: 0,
            tokens: vec!["a".into(), "b".into(), "c".into()],
            true_len: 3,
            prune_layer: vec![3, 1, 2],
            kept_per_layer: vec![2, 1],
        }]);
        let csv = render_csv(&t).unwrap();
        let curve = layerwise_curve(&t.examples).unwrap();
        for (line, want) in csv.lines().skip(1).zip(curve.iter()) {
            let got: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn html_escapes_token_text() {
        let t = trace(vec![TraceExample {
            id: 0,
            tokens: vec!["<evil>".into()],
            true_len: 1,
            prune_layer: vec![1],
            kept_per_layer: vec![0, 0],
        }]);
        let html = render_html(&t).unwrap();
        assert!(html.contains("&lt;evil&gt;"));
        assert!(!html.contains("<evil>"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let t = trace(vec![TraceExample {
            id: 0,
            tokens: vec!["x".into(), "y".into()],
            true_len: 2,
            prune_layer: vec![1, 3],
            kept_per_layer: vec![1, 1],
        }]);
        assert_eq!(render_html(&t).unwrap(), render_html(&t).unwrap());
        assert_eq!(render_csv(&t).unwrap(), render_csv(&t).unwrap());
    }
}
