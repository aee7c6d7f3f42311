//! Experiment runner: every sub-command writes its serialized config and
//! metric files into its output directory.

pub mod args;
pub mod commands;
pub mod dataset;
pub mod interp;
pub mod rundir;

use anyhow::Result;
use clap::Parser;

use args::{AssocCommand, Cli, Command, DataCommand, GanCommand, GridCommand, SynthCommand, VocabCommand};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(SynthCommand::Build(a)) => commands::synth::build(a),
        Command::Data(DataCommand::Prepare(a)) => commands::data::prepare(a),
        Command::Vocab(VocabCommand::Build(a)) => commands::vocab::build(a),
        Command::Assoc(AssocCommand::Train(a)) => commands::assoc::train(a),
        Command::Assoc(AssocCommand::Eval(a)) => commands::assoc::eval(a),
        Command::Gan(GanCommand::Train(a)) => commands::gan::train(a),
        Command::Gan(GanCommand::Eval(a)) => commands::gan::eval(a),
        Command::Grid(GridCommand::FixedZ(a)) => commands::grid::fixed_z(a).map(|_| ()),
        Command::Grid(GridCommand::FixedC(a)) => commands::grid::fixed_c(a).map(|_| ()),
        Command::Interp(a) => interp::run(a),
        Command::Report(a) => commands::report::run(a).map(|_| ()),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run(&Cli::try_parse_from(args)?)
}
