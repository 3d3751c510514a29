use acn_core::data::{enumerate_modality_subsets, Modality};

use crate::manifest::Recorder;
use crate::{out_dir, CliError, ListArgs, Outcome, Result};

pub(crate) fn run(a: &ListArgs, args: &[String]) -> Result<Outcome> {
    let rec = Recorder::start("list-subsets", args);
    let dir = out_dir(&a.out, "subsets");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut csv = String::from("id,fl,t1,t1c,t2,mask\n");
    println!("{:>3}  Fl  T1  T1c T2   mask", "id");
    for mask in enumerate_modality_subsets() {
        let marks: String = Modality::ALL
            .iter()
            .map(|&m| format!("{:<4}", if mask.contains(m) { "●" } else { "○" }))
            .collect();
        println!("{:>3}  {marks} {}", mask.subset_id(), mask.tokens());
        let flags: Vec<&str> = Modality::ALL.iter().map(|&m| if mask.contains(m) { "1" } else { "0" }).collect();
        csv.push_str(&format!("{},{},{}\n", mask.subset_id(), flags.join(","), mask.slug()));
    }
    let path = dir.join("subsets.csv");
    std::fs::write(&path, csv).map_err(|e| CliError::io(&path, e))?;
    rec.finish(&dir, toml::Table::new(), None, vec!["subsets.csv".into()])?;
    Ok(Outcome::Complete)
}
