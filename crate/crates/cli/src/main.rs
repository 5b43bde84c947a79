mod args;
mod commands;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::{ArgAction, CommandFactory, FromArgMatches};
use flowcaps::config::KvText;

use args::Cli;

/// A failure reported as a single `error: <category>: <message>` line.
#[derive(Debug)]
pub struct Failure {
    pub category: String,
    pub message: String,
    pub usage: bool,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { category: "usage".into(), message: message.into(), usage: true }
    }

    pub fn runtime(category: &str, message: impl Into<String>) -> Self {
        Self { category: category.into(), message: message.into(), usage: false }
    }
}

impl From<flowcaps::Error> for Failure {
    fn from(e: flowcaps::Error) -> Self {
        Self::runtime(e.category(), e.to_string())
    }
}

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    match run(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = f.message.split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error: {}: {msg}", f.category);
            ExitCode::from(if f.usage { 2 } else { 1 })
        }
    }
}

fn run(argv: Vec<OsString>) -> Result<(), Failure> {
    let argv = with_config_defaults(argv)?;
    let command = Cli::command().mut_subcommands(|s| s.args_override_self(true));
    let matches = match command.try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                print!("{e}");
                return Ok(());
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return Err(Failure::usage(first));
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Failure::usage(e.to_string()))?;
    println!("config {}", serde_json::to_string(&cli).expect("arguments serialize"));
    println!("seed {}", cli.global.seed);
    commands::execute(&cli)
}

/// Splices `--key value` pairs from a `--config` file in front of the explicit flags, so
/// explicit flags win.
fn with_config_defaults(argv: Vec<OsString>) -> Result<Vec<OsString>, Failure> {
    let strs: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            path = Some(strs.get(i + 1).cloned().ok_or_else(|| Failure::usage("--config needs a file"))?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::runtime("io", format!("{path}: {e}")))?;
    let kv = KvText::parse(&text).map_err(|e| Failure::usage(format!("{path}: {e}")))?;

    let root = Cli::command();
    let Some(pos) = strs.iter().skip(1).position(|a| root.find_subcommand(a).is_some()).map(|p| p + 1) else {
        return Ok(argv);
    };
    let sub = root.find_subcommand(&strs[pos]).expect("found above").clone();
    let mut injected: Vec<OsString> = Vec::new();
    for key in kv.keys() {
        let flag = key.replace('_', "-");
        if flag == "config" {
            return Err(Failure::usage(format!("{path}: config files cannot include other config files")));
        }
        let arg = sub
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(flag.as_str()))
            .ok_or_else(|| Failure::usage(format!("{path}: unknown key '{key}' for {}", strs[pos])))?;
        let value = kv.get(key).expect("key listed");
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value {
                "true" => injected.push(format!("--{flag}").into()),
                "false" => {}
                v => return Err(Failure::usage(format!("{path}: '{key}' expects true or false, got '{v}'"))),
            }
        } else {
            injected.push(format!("--{flag}").into());
            injected.push(value.into());
        }
    }
    let mut out = argv;
    out.splice(pos + 1..pos + 1, injected);
    Ok(out)
}
