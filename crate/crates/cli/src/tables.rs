//! CSV exports of result tables.

use std::fs;
use std::io::Write;
use std::path::Path;

use alphareg::io::ResultDocument;
use alphareg::{CvResult, Error};

pub type Writer = csv::Writer<Box<dyn Write>>;

pub fn writer(path: Option<&Path>) -> Result<Writer, Error> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    };
    Ok(csv::Writer::from_writer(sink))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_cv_table(path: &Path, cv: &CvResult) -> Result<(), Error> {
    let mut w = writer(Some(path))?;
    w.write_record(["alpha", "k", "h", "score"])?;
    for s in &cv.scores {
        let score = if s.score.is_finite() { s.score.to_string() } else { "inf".into() };
        w.write_record([s.alpha.to_string(), s.k.map(|k| k.to_string()).unwrap_or_default(), opt(s.h), score])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `coefficients.csv`, `ame.csv`, `fit.csv` and, when present,
/// `slx_effects.csv` and `cv.csv`.
pub fn write_fit_tables(dir: &Path, doc: &ResultDocument) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let terms: Vec<String> =
        std::iter::once("(intercept)".to_string()).chain(doc.covariate_names.iter().cloned()).collect();
    let components = &doc.composition_names[1..];

    let mut w = writer(Some(&dir.join("coefficients.csv")))?;
    w.write_record(["block", "term", "component", "estimate", "std_error"])?;
    let se_at = |row: usize, col: usize| doc.standard_errors.as_ref().map(|s| s[row][col]);
    for (r, row) in doc.coefficients.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            w.write_record(["beta", &terms[r], &components[c], &v.to_string(), &opt(se_at(r, c))])?;
        }
    }
    if let Some(gamma) = &doc.gamma {
        let cols = doc.coefficients.len();
        for (r, row) in gamma.iter().enumerate().skip(1) {
            for (c, v) in row.iter().enumerate() {
                let se = se_at(cols + r - 1, c);
                w.write_record(["gamma", &terms[r], &components[c], &v.to_string(), &opt(se)])?;
            }
        }
    }
    w.flush()?;

    let mut w = writer(Some(&dir.join("ame.csv")))?;
    w.write_record(["covariate", "component", "ame", "std_error"])?;
    for e in &doc.ame {
        for (c, v) in e.values.iter().enumerate() {
            let se = e.standard_errors.as_ref().map(|s| s[c]);
            w.write_record([&e.covariate, &doc.composition_names[c], &v.to_string(), &opt(se)])?;
        }
    }
    w.flush()?;

    let mut w = writer(Some(&dir.join("fit.csv")))?;
    w.write_record(["component", "correlation"])?;
    for (name, r) in doc.composition_names.iter().zip(&doc.correlations) {
        w.write_record([name.as_str(), &opt(*r)])?;
    }
    w.flush()?;

    if let Some(effects) = &doc.slx_effects {
        let mut w = writer(Some(&dir.join("slx_effects.csv")))?;
        w.write_record(["covariate", "component", "direct", "indirect", "total"])?;
        for e in effects {
            for (c, name) in doc.composition_names.iter().enumerate() {
                w.write_record([
                    e.covariate.clone(),
                    name.clone(),
                    e.direct[c].to_string(),
                    e.indirect[c].to_string(),
                    e.total[c].to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    if let Some(cv) = &doc.cv {
        write_cv_table(&dir.join("cv.csv"), cv)?;
    }
    Ok(())
}
