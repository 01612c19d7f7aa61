use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "cpt",
    version,
    about = "Cyclic permutation tests for fixed-design linear models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Test a linear hypothesis on the regression coefficients.
    Test(TestArgs),
    /// Confidence interval for one coefficient or contrast by test inversion.
    Ci(CiArgs),
    /// Search for a row pre-ordering and write the permutation.
    Order(OrderArgs),
    /// Run a Monte Carlo size/power study from a scenario file.
    Simulate(SimulateArgs),
    /// Re-run the command recorded in a manifest and compare outputs.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderingChoice {
    Ga,
    Search,
    None,
}

impl OrderingChoice {
    pub fn name(self) -> &'static str {
        match self {
            OrderingChoice::Ga => "ga",
            OrderingChoice::Search => "search",
            OrderingChoice::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SearchChoice {
    Ga,
    Search,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// CSV file with a header row.
    pub data: PathBuf,
    /// Design column name, or a contrast CSV with one column per contrast.
    #[arg(long)]
    pub target: String,
    /// Outcome column (default: the first column).
    #[arg(long)]
    pub outcome: Option<String>,
    /// Do not append an intercept column.
    #[arg(long)]
    pub no_intercept: bool,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Number of cyclic shifts (default: 1/alpha - 1).
    #[arg(long)]
    pub m: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct OrderingArgs {
    #[arg(long, value_enum, default_value_t = OrderingChoice::Ga)]
    pub ordering: OrderingChoice,
    /// Objective evaluations spent by the search.
    #[arg(long, default_value_t = 1000)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fixed pre-ordering: newline-separated 1-based row indices.
    #[arg(long, conflicts_with = "ordering")]
    pub preorder: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub ordering: OrderingArgs,
    /// Write report, trace and manifest here.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Print the JSON report instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CiArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub ordering: OrderingArgs,
    /// Cross-check the interval on a grid with this many points.
    #[arg(long)]
    pub grid_check: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct OrderArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = SearchChoice::Ga)]
    pub method: SearchChoice,
    #[arg(long, default_value_t = 1000)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    pub scenario: PathBuf,
    /// Scale the scenario up to n = 1000, 3000 reps and 50 design copies.
    #[arg(long)]
    pub full_scale: bool,
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    pub manifest: PathBuf,
    /// Where to write the reproduced outputs.
    #[arg(long)]
    pub output_dir: PathBuf,
}

fn abs(path: &Path) -> String {
    std::fs::canonicalize(path)
        .unwrap_or_else(|_| path.to_path_buf())
        .display()
        .to_string()
}

fn push(argv: &mut Vec<String>, flag: &str, value: impl ToString) {
    argv.push(flag.to_string());
    argv.push(value.to_string());
}

impl DataArgs {
    fn argv(&self, argv: &mut Vec<String>) {
        argv.push(abs(&self.data));
        let target = if Path::new(&self.target).is_file() {
            abs(Path::new(&self.target))
        } else {
            self.target.clone()
        };
        push(argv, "--target", target);
        if let Some(outcome) = &self.outcome {
            push(argv, "--outcome", outcome);
        }
        if self.no_intercept {
            argv.push("--no-intercept".into());
        }
        push(argv, "--alpha", self.alpha);
        if let Some(m) = self.m {
            push(argv, "--m", m);
        }
    }
}

impl OrderingArgs {
    fn argv(&self, argv: &mut Vec<String>) {
        match &self.preorder {
            Some(path) => push(argv, "--preorder", abs(path)),
            None => push(argv, "--ordering", self.ordering.name()),
        }
        push(argv, "--budget", self.budget);
        push(argv, "--seed", self.seed);
    }
}

impl Command {
    /// Canonical argument vector with absolute input paths, for manifests.
    /// The output directory is appended by the caller.
    pub fn canonical_argv(&self) -> Vec<String> {
        let mut argv = Vec::new();
        match self {
            Command::Test(a) => {
                argv.push("test".into());
                a.data.argv(&mut argv);
                a.ordering.argv(&mut argv);
                if a.json {
                    argv.push("--json".into());
                }
            }
            Command::Ci(a) => {
                argv.push("ci".into());
                a.data.argv(&mut argv);
                a.ordering.argv(&mut argv);
                if let Some(points) = a.grid_check {
                    push(&mut argv, "--grid-check", points);
                }
                if a.json {
                    argv.push("--json".into());
                }
            }
            Command::Order(a) => {
                argv.push("order".into());
                a.data.argv(&mut argv);
                let method = match a.method {
                    SearchChoice::Ga => "ga",
                    SearchChoice::Search => "search",
                };
                push(&mut argv, "--method", method);
                push(&mut argv, "--budget", a.budget);
                push(&mut argv, "--seed", a.seed);
            }
            Command::Simulate(a) => {
                argv.push("simulate".into());
                argv.push(abs(&a.scenario));
                if a.full_scale {
                    argv.push("--full-scale".into());
                }
            }
            Command::Rerun(a) => {
                argv.push("rerun".into());
                argv.push(abs(&a.manifest));
            }
        }
        argv
    }

    pub fn set_output_dir(&mut self, dir: PathBuf) {
        match self {
            Command::Test(a) => a.output_dir = Some(dir),
            Command::Ci(a) => a.output_dir = Some(dir),
            Command::Order(a) => a.output_dir = dir,
            Command::Simulate(a) => a.output_dir = dir,
            Command::Rerun(a) => a.output_dir = dir,
        }
    }
}
