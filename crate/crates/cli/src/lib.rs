//! Command-line front end: runs suites, replays cassettes, renders reports
//! and dumps individual tasks. Exit codes are listed in [`exit`].

pub mod args;
pub mod commands;
pub mod config;
pub mod exit;
pub mod inspect;

pub use args::{Cli, Command};
pub use exit::{CliResult, ExitKind, Failure};

/// Runs one parsed invocation and returns what should be printed.
pub fn dispatch(command: &Command) -> CliResult<String> {
    match command {
        Command::Run(a) => commands::cmd_run(a).map(|s| s.render()),
        Command::Replay(a) => commands::cmd_replay(a).map(|s| {
            format!("replay of {} is identical\n{}", s.original.display(), s.run.render())
        }),
        Command::Report(a) => commands::cmd_report(a).map(|files| {
            files.iter().map(|f| format!("wrote {}\n", f.display())).collect()
        }),
        Command::Inspect(a) => commands::cmd_inspect(a),
        Command::GuestDouble(a) => commands::cmd_guest_double(a).map(|()| String::new()),
        Command::ScriptToCassette(a) => {
            commands::cmd_script_to_cassette(a).map(|n| format!("wrote {n} entries to {}\n", a.out.display()))
        }
    }
}
