//! Word-level scoring against ground truth and the post-processing pipeline.

use std::fmt::{self, Write as _};

use crate::corpus::{AlignedRow, Engine, TokenStream, Window};
use crate::error::{Error, Result};
use crate::lexicon::Lexicon;
use crate::models::Corrector;

/// Percentage of positions where `preds` equals `gts`.
pub fn word_accuracy<A: AsRef<str>, B: AsRef<str>>(preds: &[A], gts: &[B]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} references",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = preds.iter().zip(gts).filter(|(p, g)| p.as_ref() == g.as_ref()).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// Overall accuracy implied by a base OCR accuracy and the accuracies on
/// the correct and erroneous OCR words, all in percent.
pub fn recompose(base_acc: f64, correct_word_acc: f64, error_word_acc: f64) -> f64 {
    let b = base_acc / 100.0;
    b * correct_word_acc + (1.0 - b) * error_word_acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    /// OCR wrong, output right.
    Fixed,
    /// OCR right, output wrong.
    Broken,
    KeptCorrect,
    StillWrong,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Fixed => "fixed",
            Category::Broken => "broken",
            Category::KeptCorrect => "kept_correct",
            Category::StillWrong => "still_wrong",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalRecord {
    pub gt: String,
    pub ocr: String,
    pub corrected: String,
    /// After post-processing (equal to `corrected` without it).
    pub final_word: String,
}

impl EvalRecord {
    pub fn category(&self) -> Category {
        match (self.ocr == self.gt, self.final_word == self.gt) {
            (false, true) => Category::Fixed,
            (true, false) => Category::Broken,
            (true, true) => Category::KeptCorrect,
            (false, false) => Category::StillWrong,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub engine: String,
    pub model: String,
    pub postprocess: bool,
    pub n_total: usize,
    pub n_ocr_correct: usize,
    pub n_ocr_error: usize,
    pub overall_acc: f64,
    /// Absent when the OCR made no errors.
    pub error_word_acc: Option<f64>,
    /// Absent when the OCR got no word right.
    pub correct_word_acc: Option<f64>,
}

impl EvalReport {
    /// Accuracy of the uncorrected OCR column.
    pub fn base_acc(&self) -> f64 {
        100.0 * self.n_ocr_correct as f64 / self.n_total as f64
    }

    /// `|overall - (n_c * cwa + n_e * ewa) / n|`
    pub fn recomposition_gap(&self) -> f64 {
        let part = |n: usize, acc: Option<f64>| n as f64 * acc.unwrap_or(0.0);
        let total = part(self.n_ocr_correct, self.correct_word_acc) + part(self.n_ocr_error, self.error_word_acc);
        (self.overall_acc - total / self.n_total as f64).abs()
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let opt = |a: Option<f64>| a.map_or("absent".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "engine={}", self.engine);
        let _ = writeln!(s, "model={}", self.model);
        let _ = writeln!(s, "postprocess={}", self.postprocess);
        let _ = writeln!(s, "n_total={}", self.n_total);
        let _ = writeln!(s, "n_ocr_correct={}", self.n_ocr_correct);
        let _ = writeln!(s, "n_ocr_error={}", self.n_ocr_error);
        let _ = writeln!(s, "base_acc={:.4}", self.base_acc());
        let _ = writeln!(s, "overall_acc={:.4}", self.overall_acc);
        let _ = writeln!(s, "error_word_acc={}", opt(self.error_word_acc));
        let _ = writeln!(s, "correct_word_acc={}", opt(self.correct_word_acc));
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |a: Option<f64>| a.map_or("-".to_string(), |v| format!("{v:.2}"));
        writeln!(
            f,
            "{:<10} {:<40} {:>5} {:>8} {:>8} {:>8} {:>8}",
            "engine", "model", "post", "base", "overall", "err-acc", "ok-acc"
        )?;
        writeln!(
            f,
            "{:<10} {:<40} {:>5} {:>8.2} {:>8.2} {:>8} {:>8}",
            self.engine,
            self.model,
            if self.postprocess { "yes" } else { "no" },
            self.base_acc(),
            self.overall_acc,
            opt(self.error_word_acc),
            opt(self.correct_word_acc)
        )
    }
}

/// Accuracy of `final_word` overall and within the OCR-correct and
/// OCR-erroneous partitions.
pub fn split_accuracy(records: &[EvalRecord], engine: &str, model: &str, postprocess: bool) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (ok, bad): (Vec<&EvalRecord>, Vec<&EvalRecord>) = records.iter().partition(|r| r.ocr == r.gt);
    let acc = |rs: &[&EvalRecord]| {
        (!rs.is_empty()).then(|| 100.0 * rs.iter().filter(|r| r.final_word == r.gt).count() as f64 / rs.len() as f64)
    };
    let finals: Vec<&str> = records.iter().map(|r| r.final_word.as_str()).collect();
    let gts: Vec<&str> = records.iter().map(|r| r.gt.as_str()).collect();
    Ok(EvalReport {
        engine: engine.to_string(),
        model: model.to_string(),
        postprocess,
        n_total: records.len(),
        n_ocr_correct: ok.len(),
        n_ocr_error: bad.len(),
        overall_acc: word_accuracy(&finals, &gts)?,
        error_word_acc: acc(&bad),
        correct_word_acc: acc(&ok),
    })
}

/// Keeps the OCR word when the correction is not a known word; otherwise
/// writes every `v` of the correction as `w`.
pub fn postprocess(corrected: &str, ocr: &str, lex: &Lexicon) -> String {
    if lex.is_valid(corrected) {
        corrected.replace('v', "w")
    } else {
        ocr.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub report: EvalReport,
    pub records: Vec<EvalRecord>,
}

/// Corrects one engine's OCR column and scores it against the ground truth.
pub fn evaluate_run(
    rows: &[AlignedRow],
    engine: Engine,
    corrector: &dyn Corrector,
    lex: &Lexicon,
    window: Window,
    postproc: bool,
) -> Result<EvalRun> {
    if corrector.window() != window {
        return Err(Error::WindowMismatch {
            trained: corrector.window().size(),
            requested: window.size(),
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let ocr = TokenStream::from_tokens(rows.iter().map(|r| r.ocr(engine).to_string()).collect())?;
    let corrected = corrector.correct(&ocr)?;
    let records: Vec<EvalRecord> = rows
        .iter()
        .zip(corrected.tokens())
        .map(|(r, c)| {
            let ocr = r.ocr(engine);
            EvalRecord {
                gt: r.gt.clone(),
                ocr: ocr.to_string(),
                corrected: c.clone(),
                final_word: if postproc { postprocess(c, ocr, lex) } else { c.clone() },
            }
        })
        .collect();
    let report = split_accuracy(&records, engine.name(), &corrector.describe(), postproc)?;
    Ok(EvalRun { report, records })
}

/// `gt, ocr, corrected, final, category` per token, tab separated, with a
/// header line.
pub fn audit_tsv(records: &[EvalRecord]) -> String {
    let mut s = String::from("gt\tocr\tcorrected\tfinal\tcategory\n");
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            r.gt,
            r.ocr,
            r.corrected,
            r.final_word,
            r.category().name()
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Alphabet;

    fn rec(gt: &str, ocr: &str, fin: &str) -> EvalRecord {
        EvalRecord {
            gt: gt.into(),
            ocr: ocr.into(),
            corrected: fin.into(),
            final_word: fin.into(),
        }
    }

    #[test]
    fn accuracy_arithmetic() {
        assert_eq!(word_accuracy(&["a", "b"], &["a", "b"]).unwrap(), 100.0);
        assert_eq!(word_accuracy(&["a", "b"], &["c", "d"]).unwrap(), 0.0);
        assert_eq!(
            word_accuracy(&["a", "b", "c", "d"], &["a", "b", "c", "x"]).unwrap(),
            75.0
        );
        assert!(matches!(
            word_accuracy(&["a"], &["a", "b"]),
            Err(Error::LengthMismatch(_))
        ));
        assert!(matches!(word_accuracy::<&str, &str>(&[], &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn two_record_split() {
        let r = split_accuracy(
            &[rec("talo", "ta1o", "talo"), rec("joki", "joki", "jokl")],
            "OLD",
            "m",
            false,
        )
        .unwrap();
        assert_eq!(r.error_word_acc, Some(100.0));
        assert_eq!(r.correct_word_acc, Some(0.0));
        assert_eq!(r.overall_acc, 50.0);
        assert!(r.recomposition_gap() < 1e-9);
    }

    #[test]
    fn empty_partition_is_absent() {
        let r = split_accuracy(&[rec("talo", "talo", "talo")], "OLD", "m", false).unwrap();
        assert_eq!(r.error_word_acc, None);
        assert!(r.to_key_values().contains("error_word_acc=absent"));
    }

    #[test]
    fn postprocess_steps() {
        let lex = Lexicon::from_words(["lukuvuoden", "talo"], "test", &Alphabet::finnish()).unwrap();
        assert_eq!(postprocess("lukuvuoden", "lukuwuoden", &lex), "lukuwuoden");
        assert_eq!(postprocess("samppaajaa", "samppanjaa", &lex), "samppanjaa");
        assert_eq!(postprocess("talo", "ta1o", &lex), "talo");
    }
}
