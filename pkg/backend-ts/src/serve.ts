/**
 * Dial-out serve loop.
 *
 * The backend runs next to the model, on the side of the link that can open
 * outbound connections. It dials the waiting proxy exactly once per served
 * instance, authenticates with the shared token, then answers the request
 * stream against a model object until it is freed or the peer disappears.
 * Nothing in this file ever listens.
 */

import * as net from "node:net";
import { setTimeout as sleep } from "node:timers/promises";

import type { SdkModel, ValueKind } from "./model.js";
import {
  encodeMessage,
  isReply,
  PROTOCOL_VERSION,
  ProtocolError,
  Status,
  StreamDecoder,
  type Message,
  type Reply,
  type Request,
} from "./wire.js";

export interface BackendOptions {
  host: string;
  port: number;
  instanceName: string;
  authToken: string;
  replyDelayMs?: number;
  connectAttempts?: number;
  retryDelayMs?: number;
  callTimeoutMs?: number;
}

export interface ExitReport {
  instanceName: string;
  counts: Record<string, number>;
  cleanExit: boolean;
  reason: string;
}

/** One JSON line, counts sorted by kind, same shape every implementation prints. */
export function exitReportJson(report: ExitReport): string {
  const counts: Record<string, number> = {};
  for (const key of Object.keys(report.counts).sort()) {
    counts[key] = report.counts[key] as number;
  }
  return JSON.stringify({
    instance_name: report.instanceName,
    counts,
    clean_exit: report.cleanExit,
    reason: report.reason,
  });
}

/** The proxy refused the handshake; no model callback was invoked. */
export class AuthenticationRejected extends Error {
  constructor(message: string) {
    super(message);
    this.name = "AuthenticationRejected";
  }
}

/** The stream ended while frames were still owed. */
export class ConnectionClosed extends Error {
  constructor(message: string) {
    super(message);
    this.name = "ConnectionClosed";
  }
}

/** The peer did not produce a full frame within the deadline. */
export class CallTimeout extends Error {
  constructor(message: string) {
    super(message);
    this.name = "CallTimeout";
  }
}

/** Every dial attempt failed. */
export class ProxyUnreachable extends Error {
  constructor(message: string) {
    super(message);
    this.name = "ProxyUnreachable";
  }
}

const DEFAULTS = {
  replyDelayMs: 0,
  connectAttempts: 5,
  retryDelayMs: 500,
  callTimeoutMs: 30_000,
};

function connectOnce(host: string, port: number, timeoutMs: number): Promise<net.Socket> {
  return new Promise((resolve, reject) => {
    const socket = net.connect({ host, port });
    const timer = setTimeout(() => {
      socket.destroy();
      reject(new Error(`connect timed out after ${timeoutMs} ms`));
    }, timeoutMs);
    socket.once("connect", () => {
      clearTimeout(timer);
      resolve(socket);
    });
    socket.once("error", (err) => {
      clearTimeout(timer);
      socket.destroy();
      reject(err);
    });
  });
}

async function dial(opts: Required<BackendOptions>): Promise<net.Socket> {
  let lastError: unknown = null;
  for (let attempt = 0; attempt < opts.connectAttempts; attempt++) {
    if (attempt > 0) await sleep(opts.retryDelayMs);
    try {
      return await connectOnce(opts.host, opts.port, opts.callTimeoutMs);
    } catch (err) {
      lastError = err;
    }
  }
  throw new ProxyUnreachable(
    `${opts.instanceName}: proxy at ${opts.host}:${opts.port} unreachable ` +
      `after ${opts.connectAttempts} attempts: ${String(lastError)}`,
  );
}

/**
 * Promise-based frame reader over a socket. The dialog is strictly serial,
 * so at most one next() is ever outstanding.
 */
class FrameReader {
  private decoder = new StreamDecoder();
  private queue: Message[] = [];
  private fatal: Error | null = null;
  private closed = false;
  private wake: (() => void) | null = null;

  constructor(socket: net.Socket) {
    socket.on("data", (chunk) => {
      try {
        this.decoder.feed(chunk);
        let message;
        while ((message = this.decoder.nextMessage()) !== null) {
          this.queue.push(message);
        }
      } catch (err) {
        this.fatal ??= err as Error;
      }
      this.notify();
    });
    socket.on("error", (err) => {
      this.fatal ??= new ConnectionClosed(`connection failed: ${err.message}`);
      this.notify();
    });
    socket.on("close", () => {
      this.closed = true;
      this.notify();
    });
  }

  private notify(): void {
    const wake = this.wake;
    this.wake = null;
    wake?.();
  }

  async next(timeoutMs: number | null): Promise<Message> {
    const deadline = timeoutMs === null ? null : Date.now() + timeoutMs;
    for (;;) {
      const message = this.queue.shift();
      if (message !== undefined) return message;
      if (this.fatal !== null) throw this.fatal;
      if (this.closed) {
        throw new ConnectionClosed(
          this.decoder.pendingBytes() > 0 ? "connection closed mid-frame" : "connection closed",
        );
      }
      await new Promise<void>((resolve, reject) => {
        let timer: NodeJS.Timeout | null = null;
        if (deadline !== null) {
          const remaining = deadline - Date.now();
          if (remaining <= 0) {
            reject(new CallTimeout(`no full frame within ${timeoutMs} ms`));
            return;
          }
          timer = setTimeout(() => {
            this.wake = null;
            reject(new CallTimeout(`no full frame within ${timeoutMs} ms`));
          }, remaining);
        }
        this.wake = () => {
          if (timer !== null) clearTimeout(timer);
          resolve();
        };
      });
    }
  }
}

const VALUE_KIND: Partial<Record<Request["type"], ValueKind>> = {
  SET_REAL: "real",
  SET_INT: "integer",
  SET_BOOL: "boolean",
  SET_STRING: "text",
  GET_REAL: "real",
  GET_INT: "integer",
  GET_BOOL: "boolean",
  GET_STRING: "text",
};

function dispatch(model: SdkModel, request: Request): Reply {
  switch (request.type) {
    case "GET_REAL":
    case "GET_INT":
    case "GET_BOOL":
    case "GET_STRING": {
      const { status, values } = model.getValues(VALUE_KIND[request.type] as ValueKind, request.vrs);
      return { type: "VALUES_REPLY", requestKind: request.type, status, values };
    }
    case "SET_REAL":
    case "SET_INT":
    case "SET_BOOL":
    case "SET_STRING":
      return {
        type: "STATUS_REPLY",
        requestKind: request.type,
        status: model.setValues(VALUE_KIND[request.type] as ValueKind, request.vrs, request.values),
      };
    case "SETUP_EXPERIMENT":
      return {
        type: "STATUS_REPLY",
        requestKind: request.type,
        status: model.setupExperiment(request.startTime, request.stopTime, request.tolerance),
      };
    case "ENTER_INIT":
      return { type: "STATUS_REPLY", requestKind: request.type, status: model.enterInitialization() };
    case "EXIT_INIT":
      return { type: "STATUS_REPLY", requestKind: request.type, status: model.exitInitialization() };
    case "DO_STEP":
      return {
        type: "STATUS_REPLY",
        requestKind: request.type,
        status: model.doStep(request.currentTime, request.stepSize),
      };
    case "TERMINATE":
      return { type: "STATUS_REPLY", requestKind: request.type, status: model.terminate() };
    case "FREE_INSTANCE":
      return { type: "STATUS_REPLY", requestKind: request.type, status: Status.Ok };
    case "HANDSHAKE":
      throw new ProtocolError("handshake repeated mid-session");
  }
}

/**
 * Dial the proxy, authenticate, then serve requests until released.
 *
 * Resolves to an ExitReport counting every request kind served. A rejected
 * handshake throws AuthenticationRejected before any model callback runs; a
 * vanished peer ends the loop with cleanExit=false rather than throwing.
 */
export async function connectAndServe(model: SdkModel, options: BackendOptions): Promise<ExitReport> {
  const opts: Required<BackendOptions> = { ...DEFAULTS, ...options };
  if (opts.replyDelayMs < 0) {
    throw new RangeError("replyDelayMs must be >= 0");
  }
  const pace = () => (opts.replyDelayMs > 0 ? sleep(opts.replyDelayMs) : Promise.resolve());

  const socket = await dial(opts);
  socket.setNoDelay(true);
  const reader = new FrameReader(socket);
  const report: ExitReport = {
    instanceName: opts.instanceName,
    counts: {},
    cleanExit: false,
    reason: "",
  };

  try {
    await pace();
    socket.write(
      encodeMessage({
        type: "HANDSHAKE",
        instanceName: opts.instanceName,
        authToken: opts.authToken,
        protocolVersion: PROTOCOL_VERSION,
      }),
    );
    const greeting = await reader.next(opts.callTimeoutMs);
    if (
      greeting.type !== "STATUS_REPLY" ||
      greeting.requestKind !== "HANDSHAKE" ||
      greeting.status !== Status.Ok
    ) {
      throw new AuthenticationRejected(`${opts.instanceName}: proxy rejected handshake`);
    }

    for (;;) {
      let request: Message;
      try {
        request = await reader.next(null);
      } catch (err) {
        if (err instanceof ConnectionClosed) {
          report.reason = err.message;
          return report;
        }
        throw err;
      }
      if (request.type === "HANDSHAKE") {
        throw new ProtocolError("handshake repeated mid-session");
      }
      if (isReply(request)) {
        throw new ProtocolError(`${request.type} is not a serviceable request`);
      }
      report.counts[request.type] = (report.counts[request.type] ?? 0) + 1;
      let reply: Reply;
      try {
        reply = dispatch(model, request);
      } catch (err) {
        if (err instanceof ProtocolError) throw err;
        console.error(`model callback failed for ${request.type}:`, err);
        reply =
          request.type === "GET_REAL" || request.type === "GET_INT" ||
          request.type === "GET_BOOL" || request.type === "GET_STRING"
            ? { type: "VALUES_REPLY", requestKind: request.type, status: Status.Error, values: [] }
            : { type: "STATUS_REPLY", requestKind: request.type, status: Status.Error };
      }
      await pace();
      socket.write(encodeMessage(reply));
      if (request.type === "FREE_INSTANCE") {
        report.cleanExit = true;
        report.reason = "freed";
        return report;
      }
    }
  } finally {
    socket.destroy();
  }
}
