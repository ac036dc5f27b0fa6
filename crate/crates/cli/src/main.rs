mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{Resolved, KEYS};
use pipeline::Pipeline;

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("gen-data", "generate the pretraining and downstream datasets"),
    ("train-teacher", "train the supervised teacher"),
    ("extract", "extract teacher features and logits"),
    ("fit-align", "fit the alignment and target transform, cache targets"),
    ("distill", "pretrain a student (train.mode selects the method)"),
    ("probe", "linear-probe (or fine-tune) the student on the downstream task"),
    ("stats", "print std-ratio diagnostics for the configured targets"),
    ("verify-theorem", "Monte-Carlo check of E[(T-S)^2] = sigma^2 + sigma_s^2"),
    ("report", "collect probe results under the run root into a CSV"),
];

fn key_help() -> String {
    let mut s = String::from("Config keys (file `key=value` lines or `--key value`; flags win):\n");
    for k in KEYS {
        s.push_str(&format!("  {:<34} {} [default: {}]\n", k.name, k.help, k.default));
    }
    s.push_str("\nOutputs go under $KDEP_RUN_ROOT (default ./runs), one directory per config hash.\n");
    s.push_str("Exit codes: 0 success, 1 validation error, 2 numeric failure.");
    s
}

fn command() -> Command {
    let mut cmd = Command::new("kdep")
        .about("Feature distillation as pretraining: data, teacher, alignment, students, probes.")
        .subcommand_required(true)
        .after_help(key_help())
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .global(true)
                .help("key=value config file"),
        );
    for k in KEYS {
        cmd = cmd.arg(
            Arg::new(k.name)
                .long(k.name)
                .value_name("VALUE")
                .global(true)
                .hide(true)
                .action(ArgAction::Set),
        );
    }
    for (name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(Command::new(*name).about(*about).after_help(key_help()));
    }
    cmd
}

fn resolve(m: &ArgMatches) -> Result<Resolved, config::ConfigError> {
    let mut cfg = Resolved::defaults();
    if let Some(path) = m.get_one::<String>("config") {
        cfg.apply_file(&PathBuf::from(path))?;
    }
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    Ok(cfg)
}

fn run_root() -> PathBuf {
    std::env::var_os("KDEP_RUN_ROOT").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn exit_for(e: &kdep::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_numeric() { 2 } else { 1 })
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cfg = match resolve(sub) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let p = Pipeline::new(run_root(), cfg);
    let result = match name {
        "gen-data" => p.data().map(|d| println!("{}", d.display())),
        "train-teacher" => p.teacher().map(|d| println!("{}", d.display())),
        "extract" => p.extract().map(|d| println!("{}", d.display())),
        "fit-align" => p.fit_align().map(|d| println!("{}", d.display())),
        "distill" => p.distill().map(|d| println!("{}", d.display())),
        "probe" => p.probe().map(|d| println!("{}", d.display())),
        "stats" => p.stats().map(|(_, text)| print!("{text}")),
        "report" => p.report().map(|(_, csv)| print!("{csv}")),
        "verify-theorem" => match p.verify_theorem() {
            Ok((_, csv, pass)) => {
                print!("{csv}");
                if !pass {
                    eprintln!("error: Monte-Carlo check failed");
                    return ExitCode::from(2);
                }
                Ok(())
            }
            Err(e) => Err(e),
        },
        _ => unreachable!("clap rejects unknown subcommands"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clap_definition_is_consistent() {
        command().debug_assert();
    }

    #[test]
    fn flags_override_and_unknown_flags_fail() {
        let m = command()
            .try_get_matches_from(["kdep", "distill", "--train.lr0", "0.5", "--align.kind=cs_var"])
            .unwrap();
        let cfg = resolve(m.subcommand().unwrap().1).unwrap();
        assert_eq!(cfg.real("train.lr0"), 0.5);
        assert_eq!(cfg.get("align.kind"), "cs_var");
        assert!(command().try_get_matches_from(["kdep", "distill", "--train.lr", "1"]).is_err());
    }
}
