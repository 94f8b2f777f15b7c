// Load TSV/JSONL datasets, map OK/BAD labels, count labels and check for
// train/dev leakage.
//
//     cargo run --example corpus_ingest

use std::error::Error;
use std::fmt::Write as _;

use ced_harness::corpus::{
    check_leakage, load_dataset, normalize_pair, parse_dataset, split_stats, write_dataset, Format,
    LabelScheme, Split,
};
use ced_harness::synth::{generate, Spec};

pub fn run_example() -> Result<String, Box<dyn Error>> {
    let mut out = String::new();
    let dir = tempfile::tempdir()?;

    // SynCED-sized splits: 4000/4000 train, 500/500 dev
    let train = generate(&Spec::new("synced-train", Split::Train, 4000, 4000).seed(11));
    let dev = generate(&Spec::new("synced-dev", Split::Dev, 500, 500).seed(12));
    let train_path = dir.path().join("synced-train.tsv");
    let dev_path = dir.path().join("synced-dev.jsonl");
    std::fs::write(&train_path, write_dataset(&train, Format::Tsv))?;
    std::fs::write(&dev_path, write_dataset(&dev, Format::Jsonl))?;

    let train = load_dataset(&train_path, Format::Tsv, LabelScheme::Native, Split::Train)?;
    let dev = load_dataset(&dev_path, Format::Jsonl, LabelScheme::Native, Split::Dev)?;
    for ds in [&train, &dev] {
        let s = split_stats(ds);
        writeln!(out, "{}: NOT {} ERR {}", ds.name, s.n_not, s.n_err)?;
    }
    writeln!(out, "leaks: {}", check_leakage(&train, &dev).leaks.len())?;

    // WMT-style files spell labels OK/BAD
    let wmt =
        "id\tsource\ttarget\tlabel\n1\tHello.\tHallo.\tOK\n2\tNo entry.\tEintritt frei.\tBAD\n";
    let ds = parse_dataset(
        wmt.as_bytes(),
        "wmt22-mini",
        Split::Dev,
        Format::Tsv,
        LabelScheme::OkBad,
    )?;
    let golds: Vec<_> = ds.pairs.iter().map(|p| p.gold.unwrap().as_str()).collect();
    writeln!(out, "OK/BAD mapped to {golds:?}")?;

    let (s, t) = normalize_pair(
        "  Cafe\u{301}   opens at 9.30 ",
        "Das Cafe\u{301}  öffnet um 9.30",
    )?;
    writeln!(out, "normalized: {s:?} / {t:?}")?;
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    print!("{}", run_example()?);
    Ok(())
}
