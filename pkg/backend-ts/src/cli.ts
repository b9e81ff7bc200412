/**
 * Command-line backend runner.
 *
 * Same flag surface and exit codes as the Python `cosimlink backend`
 * subcommand: 0 released cleanly, 1 bad arguments, 2 runtime or protocol
 * failure, 3 handshake rejected. The token falls back to COSIM_TOKEN so
 * orchestrators never have to put secrets on a command line.
 */

import { parseArgs } from "node:util";

import { createModel, MODEL_REGISTRY } from "./model.js";
import {
  AuthenticationRejected,
  connectAndServe,
  exitReportJson,
  type BackendOptions,
} from "./serve.js";

const TOKEN_ENV_VAR = "COSIM_TOKEN";

const EXIT_OK = 0;
const EXIT_VALIDATION = 1;
const EXIT_RUNTIME = 2;
const EXIT_AUTH = 3;

const USAGE = `usage: cosimlink-backend --model {${Object.keys(MODEL_REGISTRY).sort().join(",")}} --connect HOST:PORT
                         [--token TOKEN] [--name NAME] [--delay-ms MS]

Dial a waiting co-simulation proxy and serve one model until released.

  --model NAME         built-in model to serve
  --connect HOST:PORT  proxy address to dial
  --token TOKEN        shared secret (falls back to ${TOKEN_ENV_VAR})
  --name NAME          instance name (defaults to the model name)
  --delay-ms MS        artificial delay before every outgoing frame
`;

class UsageError extends Error {}

interface CliOptions extends BackendOptions {
  model: string;
}

function parseAddress(text: string): { host: string; port: number } {
  const sep = text.lastIndexOf(":");
  if (sep <= 0 || sep === text.length - 1) {
    throw new UsageError(`address '${text}' is not of the form host:port`);
  }
  const host = text.slice(0, sep);
  const port = Number(text.slice(sep + 1));
  if (!Number.isInteger(port) || port < 1 || port > 65535) {
    throw new UsageError(`port in '${text}' outside 1..65535`);
  }
  return { host, port };
}

function parseCommandLine(argv: string[]): CliOptions {
  const { values } = parseArgs({
    args: argv,
    allowPositionals: false,
    options: {
      model: { type: "string" },
      connect: { type: "string" },
      token: { type: "string" },
      name: { type: "string" },
      "delay-ms": { type: "string" },
      help: { type: "boolean", short: "h" },
    },
  });

  if (values.help) {
    process.stdout.write(USAGE);
    process.exit(EXIT_OK);
  }
  if (values.model === undefined) throw new UsageError("--model is required");
  if (values.connect === undefined) throw new UsageError("--connect is required");

  const token = values.token ?? process.env[TOKEN_ENV_VAR];
  if (token === undefined || token === "") {
    throw new UsageError(`no --token given and ${TOKEN_ENV_VAR} is unset`);
  }

  let replyDelayMs = 0;
  if (values["delay-ms"] !== undefined) {
    replyDelayMs = Number(values["delay-ms"]);
    if (!Number.isInteger(replyDelayMs) || replyDelayMs < 0) {
      throw new UsageError(`--delay-ms must be a non-negative integer, got '${values["delay-ms"]}'`);
    }
  }

  const { host, port } = parseAddress(values.connect);
  return {
    host,
    port,
    instanceName: values.name ?? values.model,
    authToken: token,
    replyDelayMs,
    model: values.model,
  };
}

async function main(): Promise<number> {
  let options: CliOptions;
  try {
    options = parseCommandLine(process.argv.slice(2));
  } catch (err) {
    process.stderr.write(`backend: ${err instanceof Error ? err.message : String(err)}\n`);
    process.stderr.write(USAGE);
    return EXIT_VALIDATION;
  }

  let model;
  try {
    model = createModel(options.model);
  } catch (err) {
    process.stderr.write(`backend: ${err instanceof Error ? err.message : String(err)}\n`);
    return EXIT_VALIDATION;
  }

  try {
    const report = await connectAndServe(model, options);
    process.stdout.write(exitReportJson(report) + "\n");
    return report.cleanExit ? EXIT_OK : EXIT_RUNTIME;
  } catch (err) {
    if (err instanceof AuthenticationRejected) {
      process.stderr.write(`backend: ${err.message}\n`);
      return EXIT_AUTH;
    }
    process.stderr.write(`backend: ${err instanceof Error ? err.message : String(err)}\n`);
    return EXIT_RUNTIME;
  }
}

main().then((code) => {
  process.exitCode = code;
});
