#!/usr/bin/env node
/**
 * emb-exporter: extract image and prompt-template text embeddings into the
 * EMB1 format (plus the token-table JSON), and verify existing files.
 */

import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import {
  DEFAULT_TEMPLATE,
  exportImageFeatures,
  exportTextFeatures,
  listClassFolders,
  readClassList,
  writeTokenTable,
} from "./export.js";
import { verifyEmb1 } from "./verify.js";

export async function main(argv: string[]): Promise<number> {
  let exitCode = 0;
  await yargs(argv)
    .scriptName("emb-exporter")
    .command(
      "export",
      "Embed a class-per-folder image dataset into an EMB1 file",
      (y) =>
        y
          .option("images", { type: "string", demandOption: true, describe: "dataset root" })
          .option("model", { type: "string", default: "toy-rgb-v1" })
          .option("out", { type: "string", demandOption: true })
          .option("token-table-out", { type: "string", describe: "also write the token-table JSON" }),
      (args) => {
        const summary = exportImageFeatures(args.images, args.model, args.out);
        if (args.tokenTableOut) {
          writeTokenTable(listClassFolders(args.images), args.model, args.tokenTableOut);
        }
        for (const w of summary.warnings) console.error(w);
        console.log(JSON.stringify(summary, null, 2));
      },
    )
    .command(
      "export-text",
      "Embed prompt-template text for a class list into an EMB1 file",
      (y) =>
        y
          .option("classes", { type: "string", demandOption: true, describe: "class list file" })
          .option("template", { type: "string", default: DEFAULT_TEMPLATE })
          .option("model", { type: "string", default: "toy-rgb-v1" })
          .option("out", { type: "string", demandOption: true })
          .option("token-table-out", { type: "string" }),
      (args) => {
        const names = readClassList(args.classes);
        const summary = exportTextFeatures(names, args.template, args.model, args.out);
        if (args.tokenTableOut) {
          writeTokenTable(names, args.model, args.tokenTableOut);
        }
        console.log(JSON.stringify(summary, null, 2));
      },
    )
    .command(
      "verify <file>",
      "Parse an EMB1 file and report dim, counts, and norm range",
      (y) => y.positional("file", { type: "string", demandOption: true }),
      (args) => {
        const summary = verifyEmb1(args.file as string);
        console.log(JSON.stringify(summary, null, 2));
        if (!summary.ok) exitCode = 1;
      },
    )
    .demandCommand(1)
    .strict()
    .fail((msg, err) => {
      console.error(msg ?? err?.message ?? "error");
      exitCode = 1;
    })
    .parseAsync();
  return exitCode;
}

const isDirectRun = process.argv[1] && import.meta.url.endsWith(
  process.argv[1].split("/").pop() ?? "",
);
if (isDirectRun) {
  main(hideBin(process.argv)).then((code) => {
    process.exitCode = code;
  });
}
