use std::fs::File;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use lei2json::{convert, convert_and_publish, write_jsonl, ColumnMapping, Target, MAX_IN_FLIGHT};
use leisa_core::SchemaRegistry;

#[derive(Debug, Parser)]
#[command(name = "lei2json", version, about = "Convert CSV livestock records to event envelopes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Input {
    /// CSV file with a header row.
    #[arg(long = "in")]
    input: PathBuf,
    /// Event type, e.g. weightEvent.
    #[arg(long)]
    event: String,
    /// JSON column mapping; defaults to columns named after the schema fields.
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Extra `<eventType>.json` schemas.
    #[arg(long)]
    schema_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write one envelope per line.
    Convert {
        #[command(flatten)]
        input: Input,
        /// Output file, `-` for stdout.
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate and publish every row through a gateway.
    Publish {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        user: String,
        #[arg(long, env = "LEI2JSON_PASSWORD", hide_env_values = true)]
        pass: String,
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        base_url: String,
        #[arg(long, default_value_t = MAX_IN_FLIGHT)]
        in_flight: usize,
    },
}

fn load(input: &Input) -> anyhow::Result<(SchemaRegistry, Option<ColumnMapping>)> {
    let schemas = match &input.schema_dir {
        Some(dir) => SchemaRegistry::load_dir(dir)?,
        None => SchemaRegistry::builtin(),
    };
    let mapping = input.mapping.as_deref().map(|p| ColumnMapping::load(p, &input.event, &schemas)).transpose()?;
    Ok((schemas, mapping))
}

fn run_convert(input: &Input, out: &Path) -> anyhow::Result<bool> {
    let (schemas, mapping) = load(input)?;
    let conversion = convert(&input.input, &input.event, mapping.as_ref(), &schemas)?;
    for e in &conversion.errors {
        match &e.column {
            Some(c) => eprintln!("row {} [{c}]: {}", e.row, e.message),
            None => eprintln!("row {}: {}", e.row, e.message),
        }
    }
    if out == Path::new("-") {
        write_jsonl(&conversion.envelopes, &mut io::stdout().lock())?;
    } else {
        let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
        write_jsonl(&conversion.envelopes, &mut BufWriter::new(file))?;
    }
    eprintln!(
        "{} rows: {} converted, {} errors",
        conversion.data_rows(),
        conversion.envelopes.len(),
        conversion.errors.len()
    );
    Ok(conversion.errors.is_empty())
}

fn run_publish(input: &Input, target: &Target) -> anyhow::Result<bool> {
    let (schemas, mapping) = load(input)?;
    let (summary, err) = match convert_and_publish(&input.input, &input.event, mapping.as_ref(), &schemas, target) {
        Ok(s) => (s, None),
        Err(e) => match e.summary() {
            Some(s) => (s.clone(), Some(e)),
            None => return Err(e.into()),
        },
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(e) = err {
        return Err(anyhow::Error::from(e).context("publishing stopped early"));
    }
    Ok(summary.failed() == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Convert { input, out } => run_convert(input, out),
        Command::Publish { input, user, pass, base_url, in_flight } => {
            let mut target = Target::new(base_url, user, pass);
            target.in_flight = *in_flight;
            run_publish(input, &target)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        // some rows failed; the output still holds the good ones
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
