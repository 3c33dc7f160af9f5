//! Report rendering shared by the train and eval commands. Average
//! precisions are fractions in core and appear here as percentages.

use openset_core::eval::EvalReport;

fn rows(report: &EvalReport, close_set_accuracy: Option<f64>) -> Vec<(String, String)> {
    let mut rows = vec![
        ("wilderness_impact".to_string(), report.wi.to_string()),
        (
            "wi_recall_met".to_string(),
            u8::from(report.wi_recall_met).to_string(),
        ),
        ("tp_known".to_string(), report.tp_k.to_string()),
        ("fp_unknown".to_string(), report.fp_u.to_string()),
        ("fp_known".to_string(), report.fp_k.to_string()),
        ("aose".to_string(), report.aose.to_string()),
        ("map_known".to_string(), (100.0 * report.map_k).to_string()),
        (
            "ap_unknown".to_string(),
            (100.0 * report.ap_unknown).to_string(),
        ),
    ];
    for (cat, ap) in &report.per_class_ap {
        rows.push((format!("ap_class_{cat}"), (100.0 * ap).to_string()));
    }
    if let Some(acc) = close_set_accuracy {
        rows.push(("close_set_accuracy".to_string(), acc.to_string()));
    }
    if let Some(latent) = &report.latent {
        rows.push((
            "intra_class_variance".to_string(),
            latent.intra_class_variance.to_string(),
        ));
        rows.push((
            "inter_class_distance".to_string(),
            latent.inter_class_distance.to_string(),
        ));
    }
    rows
}

pub fn report_csv(report: &EvalReport, close_set_accuracy: Option<f64>) -> String {
    let mut out = String::from("metric,value\n");
    for (name, value) in rows(report, close_set_accuracy) {
        out.push_str(&name);
        out.push(',');
        out.push_str(&value);
        out.push('\n');
    }
    out
}

pub fn report_txt(report: &EvalReport, close_set_accuracy: Option<f64>) -> String {
    let mut out = String::new();
    let recall_note = if report.wi_recall_met {
        "at the requested recall level"
    } else {
        "recall level unreachable, measured at best effort"
    };
    out.push_str(&format!(
        "wilderness impact     {:.4}  ({recall_note})\n",
        report.wi
    ));
    out.push_str(&format!(
        "  operating counts    TP {}  FP on unknown {}  FP elsewhere {}\n",
        report.tp_k, report.fp_u, report.fp_k
    ));
    out.push_str(&format!("open-set errors       {}\n", report.aose));
    out.push_str(&format!("mAP known             {:.4}\n", 100.0 * report.map_k));
    for (cat, ap) in &report.per_class_ap {
        out.push_str(&format!("  AP class {cat:<10} {:.4}\n", 100.0 * ap));
    }
    out.push_str(&format!(
        "AP unknown            {:.4}\n",
        100.0 * report.ap_unknown
    ));
    if let Some(acc) = close_set_accuracy {
        out.push_str(&format!("close-set accuracy    {acc:.4}\n"));
    }
    if let Some(latent) = &report.latent {
        out.push_str(&format!(
            "intra-class variance  {:.6}\n",
            latent.intra_class_variance
        ));
        out.push_str(&format!(
            "inter-class distance  {:.6}\n",
            latent.inter_class_distance
        ));
    }
    out
}
