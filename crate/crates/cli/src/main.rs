use std::process::ExitCode;

use clap::Parser;
use reftrack_cli::commands::{cmd_attn, cmd_eval, cmd_infer, cmd_sweep, cmd_synth, cmd_train, Cli, Command};
use reftrack_cli::Result;

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let paths = cmd_synth(&a)?;
            println!("wrote {} clips to {}", paths.len(), a.out.display());
        }
        Command::Train(a) => {
            let s = cmd_train(&a)?;
            println!(
                "trained {} steps on {} examples from {} clips: loss {:.6} -> {:.6}",
                s.records.len(),
                s.examples,
                s.clips,
                s.initial_loss,
                s.final_loss
            );
        }
        Command::Infer(a) => {
            let p = cmd_infer(&a)?;
            println!("predicted {} frames into {}", p.tracks.len(), a.out.display());
        }
        Command::Eval(a) => {
            let r = cmd_eval(&a)?;
            println!("AJ {:.4}  APD {:.4}  OA {:.4}", r.average_jaccard, r.apd, r.occlusion_accuracy);
        }
        Command::Attn(a) => {
            let r = cmd_attn(&a)?;
            let mass: Vec<String> = r.frame_mass.iter().map(|m| format!("{m:.3}")).collect();
            println!("frame mass [{}], argmax frame {}", mass.join(", "), r.argmax_frame);
        }
        Command::Sweep(a) => {
            let rows = cmd_sweep(&a)?;
            println!("wrote {} sweep rows to {}", rows.len(), a.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
