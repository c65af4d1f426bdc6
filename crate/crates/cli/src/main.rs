mod args;
mod commands;
mod record;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use record::categorize;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    let argv: Vec<String> = std::env::args().collect();
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a, &argv),
        Command::Train(a) => commands::train(a, &argv),
        Command::Eval(a) => commands::eval(a, &argv),
        Command::Sample(a) => commands::sample(a, &argv),
        Command::ReportContours(a) => commands::report_contours(a, &argv),
        Command::Trace(a) => commands::trace(a, &argv),
        Command::Similarity(a) => commands::similarity(a, &argv),
        Command::ManifoldDensity(a) => commands::manifold_density(a, &argv),
        Command::CookbookCheck(a) => commands::cookbook_check(a, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = categorize(&e);
            eprintln!("error [{}]: {e:#}", cat.label());
            ExitCode::from(cat as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    use super::Cli;

    #[test]
    fn every_flag_documents_its_default_or_requirement() {
        let cli = Cli::command();
        for sub in cli.get_subcommands() {
            for arg in sub.get_arguments() {
                let id = arg.get_id().as_str();
                if matches!(id, "help" | "version" | "verbose") {
                    continue;
                }
                let help = arg.get_help().map(|h| h.to_string()).unwrap_or_default();
                assert!(!help.is_empty(), "{} --{id} has no help", sub.get_name());
                let documented = !arg.get_default_values().is_empty()
                    || help.contains("Default:")
                    || help.contains("Required")
                    || !arg.get_possible_values().is_empty() && help.contains("Default");
                assert!(documented, "{} --{id} documents neither a default nor a requirement: {help}", sub.get_name());
            }
        }
    }

    #[test]
    fn numeric_flags_state_units() {
        let cli = Cli::command();
        for sub in cli.get_subcommands() {
            for arg in sub.get_arguments() {
                let help = arg.get_help().map(|h| h.to_string()).unwrap_or_default();
                let takes_path = matches!(arg.get_value_hint(), clap::ValueHint::AnyPath | clap::ValueHint::FilePath | clap::ValueHint::DirPath);
                let numeric = help.contains("[") || help.contains("JSON") || takes_path;
                let named = ["data", "test", "out", "ckpt", "config", "name", "start", "objective", "estimator", "optimizer", "coupling", "help", "version", "verbose"];
                if named.contains(&arg.get_id().as_str()) {
                    continue;
                }
                assert!(numeric, "{} --{} states no unit: {help}", sub.get_name(), arg.get_id());
            }
        }
    }
}
