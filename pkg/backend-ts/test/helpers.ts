import { createServer, type AddressInfo } from "node:net";
import { readFileSync } from "node:fs";
import { resolve } from "node:path";

import type { GetType, Message, RequestType, Status, WireValue } from "../src/wire.js";

export interface GoldenVector {
  name: string;
  frame_hex: string;
  message: Record<string, unknown>;
}

/** The frozen frame corpus every codec implementation must reproduce. */
export function loadGoldenVectors(): GoldenVector[] {
  const path = resolve(import.meta.dirname, "../../golden/wire_vectors.json");
  return (JSON.parse(readFileSync(path, "utf8")) as { vectors: GoldenVector[] }).vectors;
}

/** Build the typed message a corpus entry describes. */
export function messageFromJson(doc: Record<string, unknown>): Message {
  const type = doc.type as string;
  switch (type) {
    case "HANDSHAKE":
      return {
        type,
        instanceName: doc.instance_name as string,
        authToken: doc.auth_token as string,
        protocolVersion: doc.protocol_version as number,
      };
    case "SETUP_EXPERIMENT":
      return {
        type,
        startTime: doc.start_time as number,
        stopTime: doc.stop_time as number | null,
        tolerance: doc.tolerance as number | null,
      };
    case "DO_STEP":
      return { type, currentTime: doc.current_time as number, stepSize: doc.step_size as number };
    case "ENTER_INIT":
    case "EXIT_INIT":
    case "TERMINATE":
    case "FREE_INSTANCE":
      return { type };
    case "SET_REAL":
    case "SET_INT":
    case "SET_BOOL":
    case "SET_STRING":
      return { type, vrs: doc.vrs as number[], values: doc.values as never[] } as Message;
    case "GET_REAL":
    case "GET_INT":
    case "GET_BOOL":
    case "GET_STRING":
      return { type, vrs: doc.vrs as number[] };
    case "STATUS_REPLY":
      return { type, requestKind: doc.request_kind as RequestType, status: doc.status as Status };
    case "VALUES_REPLY":
      return {
        type,
        requestKind: doc.request_kind as GetType,
        status: doc.status as Status,
        values: doc.values as WireValue[],
      };
    default:
      throw new Error(`unhandled vector type ${type}`);
  }
}

/** Reserve an ephemeral loopback port and release it. */
export function freePort(): Promise<number> {
  return new Promise((resolvePort, reject) => {
    const server = createServer();
    server.once("error", reject);
    server.listen(0, "127.0.0.1", () => {
      const port = (server.address() as AddressInfo).port;
      server.close(() => resolvePort(port));
    });
  });
}
