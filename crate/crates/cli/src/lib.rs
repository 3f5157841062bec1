//! Command-line workflow around the `mgproto` library: dataset generation,
//! training, evaluation, ensembling, gradient checks, reports and the
//! mechanism-delta comparison.

pub mod args;
pub mod commands;
pub mod manifest;
pub mod plot;
pub mod report;
pub mod settings;

use mgproto::Result;

use args::{Cli, Command};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => commands::cmd_gen(a).map(drop),
        Command::Train(a) => commands::cmd_train(a).map(drop),
        Command::Eval(a) => commands::cmd_eval(a).map(drop),
        Command::Ensemble(a) => commands::cmd_ensemble(a),
        Command::Gradcheck(a) => commands::cmd_gradcheck(a).map(drop),
        Command::Report(a) => commands::cmd_report(a).map(drop),
        Command::Ablate(a) => commands::cmd_ablate(a).map(drop),
    }
}
