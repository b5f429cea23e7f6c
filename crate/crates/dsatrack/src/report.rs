//! Metric reports (CSV, SVG, JSON) and prune specs (JSON).

use serde::{Deserialize, Serialize};
use serde_json::Value;

use dsatrack_core::eval::metrics::{precision_thresholds, success_thresholds};
use dsatrack_core::eval::MetricReport;
use dsatrack_core::pruning::{LayerGroups, PruneMethod, PruneSpec};

use crate::error::{CliError, CliResult};

/// One row per threshold: `curve,threshold,value`.
pub fn metrics_csv(r: &MetricReport) -> String {
    let mut s = String::from("curve,threshold,value\n");
    for (t, v) in precision_thresholds().iter().zip(&r.precision) {
        s.push_str(&format!("precision,{t},{v:.6}\n"));
    }
    for (t, v) in success_thresholds().iter().zip(&r.success) {
        s.push_str(&format!("success,{t:.2},{v:.6}\n"));
    }
    s
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct AttributeSummary {
    pub attribute: String,
    pub sequences: usize,
    pub precision_at_20: f64,
    pub success_auc: f64,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub sequences: usize,
    pub frames: usize,
    pub precision_at_20: f64,
    pub success_auc: f64,
    pub attributes: Vec<AttributeSummary>,
}

pub fn metrics_summary(r: &MetricReport) -> MetricSummary {
    MetricSummary {
        sequences: r.sequences,
        frames: r.frames,
        precision_at_20: r.precision_at_20,
        success_auc: r.success_auc,
        attributes: r
            .attributes
            .iter()
            .map(|a| AttributeSummary {
                attribute: a.attribute.name().to_string(),
                sequences: a.sequences,
                precision_at_20: a.precision_at_20,
                success_auc: a.success_auc,
            })
            .collect(),
    }
}

fn polyline(xs: &[f64], ys: &[f64], x_max: f64, ox: f64) -> String {
    let (w, h, top) = (300.0, 200.0, 30.0);
    xs.iter()
        .zip(ys)
        .map(|(x, y)| format!("{:.1},{:.1}", ox + x / x_max * w, top + (1.0 - y) * h))
        .collect::<Vec<_>>()
        .join(" ")
}

fn panel(title: &str, xs: &[f64], ys: &[f64], x_max: f64, x_label: &str, ox: f64) -> String {
    let mut s = format!(
        "<rect x=\"{ox}\" y=\"30\" width=\"300\" height=\"200\" fill=\"none\" stroke=\"#444\"/>\n\
         <text x=\"{}\" y=\"20\" font-size=\"13\" text-anchor=\"middle\">{title}</text>\n\
         <text x=\"{}\" y=\"252\" font-size=\"11\" text-anchor=\"middle\">{x_label}</text>\n",
        ox + 150.0,
        ox + 150.0
    );
    for i in 0..=4 {
        let y = 30.0 + i as f64 * 50.0;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" font-size=\"9\" text-anchor=\"end\">{:.2}</text>\n",
            ox - 4.0,
            y + 3.0,
            1.0 - i as f64 * 0.25
        ));
    }
    s.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\" points=\"{}\"/>\n",
        polyline(xs, ys, x_max, ox)
    ));
    s
}

/// Precision and success plots side by side.
pub fn metrics_svg(r: &MetricReport) -> String {
    let mut s = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"720\" height=\"270\" font-family=\"sans-serif\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
    );
    s.push_str(&panel(
        &format!("Precision (at 20 px: {:.3})", r.precision_at_20),
        &precision_thresholds(),
        &r.precision,
        50.0,
        "center error threshold (px)",
        40.0,
    ));
    s.push_str(&panel(
        &format!("Success (AUC: {:.3})", r.success_auc),
        &success_thresholds(),
        &r.success,
        1.0,
        "overlap threshold",
        400.0,
    ));
    s.push_str("</svg>\n");
    s
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ContributionEntry {
    pub layer: usize,
    pub contribution: f64,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct GroupsDoc {
    pub d: Vec<usize>,
    pub s: Vec<usize>,
    pub exempt: Vec<usize>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct PruneSpecDoc {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    pub p_d: f64,
    pub p_s: f64,
    pub groups: GroupsDoc,
    pub contributions: Vec<ContributionEntry>,
    pub removed_d: Vec<usize>,
    pub removed_s: Vec<usize>,
    pub removed: Vec<usize>,
    pub retained: Vec<usize>,
}

pub fn method_name(m: PruneMethod) -> &'static str {
    match m {
        PruneMethod::ContributionRanking => "contribution-ranking",
        PruneMethod::Sequential => "sequential",
    }
}

pub fn prune_doc(spec: &PruneSpec, variant: Option<&str>) -> PruneSpecDoc {
    PruneSpecDoc {
        method: method_name(spec.method).to_string(),
        variant: variant.map(str::to_string),
        p_d: spec.p_d,
        p_s: spec.p_s,
        groups: GroupsDoc {
            d: spec.groups.d.clone(),
            s: spec.groups.s.clone(),
            exempt: spec.groups.exempt.clone(),
        },
        contributions: spec
            .contributions
            .iter()
            .map(|&(layer, contribution)| ContributionEntry { layer, contribution })
            .collect(),
        removed_d: spec.removed_d.clone(),
        removed_s: spec.removed_s.clone(),
        removed: spec.removed(),
        retained: spec.retained.clone(),
    }
}

pub fn spec_from_doc(doc: &PruneSpecDoc) -> CliResult<PruneSpec> {
    let method = match doc.method.as_str() {
        "contribution-ranking" => PruneMethod::ContributionRanking,
        "sequential" => PruneMethod::Sequential,
        m => return Err(CliError::invalid(format!("unknown prune method `{m}`"))),
    };
    Ok(PruneSpec {
        method,
        p_d: doc.p_d,
        p_s: doc.p_s,
        groups: LayerGroups {
            d: doc.groups.d.clone(),
            s: doc.groups.s.clone(),
            exempt: doc.groups.exempt.clone(),
        },
        removed_d: doc.removed_d.clone(),
        removed_s: doc.removed_s.clone(),
        retained: doc.retained.clone(),
        contributions: doc.contributions.iter().map(|c| (c.layer, c.contribution)).collect(),
    })
}

fn entry(layer: &Value, value: &Value) -> CliResult<(usize, f64)> {
    let layer = match layer {
        Value::Number(n) => n.as_u64().map(|v| v as usize),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
    .ok_or_else(|| CliError::invalid(format!("bad layer index {layer}")))?;
    let v = value
        .as_f64()
        .ok_or_else(|| CliError::invalid(format!("layer {layer}: contribution {value} is not a number")))?;
    Ok((layer, v))
}

/// Reads a contribution table: `{"2": 0.13, ...}`, `[[2, 0.13], ...]`,
/// `[{"layer": 2, "contribution": 0.13}, ...]`, or any of those under a
/// `"contributions"` key.
pub fn parse_contributions(text: &str) -> CliResult<Vec<(usize, f64)>> {
    let v: Value = serde_json::from_str(text)?;
    let v = match &v {
        Value::Object(m) if m.contains_key("contributions") => &m["contributions"],
        _ => &v,
    };
    let mut out = match v {
        Value::Object(m) => m
            .iter()
            .map(|(k, x)| entry(&Value::String(k.clone()), x))
            .collect::<CliResult<Vec<_>>>()?,
        Value::Array(items) => items
            .iter()
            .map(|it| match it {
                Value::Array(p) if p.len() == 2 => entry(&p[0], &p[1]),
                Value::Object(o) => entry(
                    o.get("layer").unwrap_or(&Value::Null),
                    o.get("contribution").unwrap_or(&Value::Null),
                ),
                other => Err(CliError::invalid(format!("bad contribution entry {other}"))),
            })
            .collect::<CliResult<Vec<_>>>()?,
        other => return Err(CliError::invalid(format!("bad contribution table {other}"))),
    };
    out.sort_by_key(|e| e.0);
    if out.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(CliError::invalid("duplicate layer in contribution table"));
    }
    Ok(out)
}
